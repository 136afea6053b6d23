"""Edit-quality metrics against a pluggable embedder.

The default embedder mean-pools latents and projects them with a seeded
matrix; it is NOT a perceptual model, so scores are only comparable between
runs of this library (ablations, regressions), never to published numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .attention import TextEmbedding
from .errors import DegenerateVectorError
from .latents import LatentVideo
from .numerics import cosine_similarity, matmul, seeded_tensor


class Embedder(Protocol):
    """Anything that maps frames and prompts into one comparison space."""

    def embed_frames(self, video: LatentVideo) -> np.ndarray: ...

    def embed_prompt(self, text: TextEmbedding) -> np.ndarray: ...


class ToyEmbedder:
    """Seeded linear embedder over mean-pooled latents and token embeddings."""

    def __init__(self, seed: int, channels: int, text_dim: int, dim: int = 12):
        self.dim = dim
        self._frame_proj = seeded_tensor([channels, dim], seed, "metrics/frame-proj")
        self._text_proj = seeded_tensor([text_dim, dim], seed, "metrics/text-proj")

    def embed_frames(self, video: LatentVideo) -> np.ndarray:
        pooled = video.data.mean(axis=(2, 3), dtype=np.float64).astype(np.float32)
        return matmul(pooled, self._frame_proj)

    def embed_prompt(self, text: TextEmbedding) -> np.ndarray:
        pooled = text.data.mean(axis=0, dtype=np.float64).astype(np.float32)
        return matmul(pooled.reshape(1, -1), self._text_proj)[0]


@dataclass
class MetricResult:
    clip_t_like: float
    clip_f_like: float
    frame_acc_like: float
    clip_f_degenerate: bool  # single-frame video: coherence reported as 1


def metric_suite(
    frame_embeddings: np.ndarray,
    prompt_embedding_src: np.ndarray,
    prompt_embedding_tgt: np.ndarray,
) -> MetricResult:
    """Prompt alignment, temporal coherence and edit-success rate.

    clip_t_like: mean cosine similarity of each frame to the target prompt.
    clip_f_like: mean cosine similarity between adjacent frames (1 when
    there is only one frame, flagged as degenerate).
    frame_acc_like: fraction of frames closer to the target prompt than to
    the source prompt.
    """
    frames = np.asarray(frame_embeddings, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise DegenerateVectorError(f"need [N,d] frame embeddings, got {frames.shape}")
    n = frames.shape[0]
    clip_t = float(
        np.mean([cosine_similarity(frames[i], prompt_embedding_tgt) for i in range(n)])
    )
    degenerate = n == 1
    if degenerate:
        clip_f = 1.0
    else:
        clip_f = float(
            np.mean(
                [cosine_similarity(frames[i], frames[i + 1]) for i in range(n - 1)]
            )
        )
    wins = sum(
        cosine_similarity(frames[i], prompt_embedding_tgt)
        > cosine_similarity(frames[i], prompt_embedding_src)
        for i in range(n)
    )
    return MetricResult(
        clip_t_like=clip_t,
        clip_f_like=clip_f,
        frame_acc_like=wins / n,
        clip_f_degenerate=degenerate,
    )
