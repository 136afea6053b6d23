"""Latent-space plumbing: toy encoder, DDIM schedule, inversion and sampling.

The denoiser is a pluggable callable ``predictor(z, t, step_index) -> eps``
operating on float32 latents [N, C, h, w]. Inversion runs the deterministic
DDIM update in ascending-t direction using the destination-timestep noise
estimate, so the cache it populates is keyed by exactly the timesteps the
sampling pass evaluates at.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ArtifactIOError, ConfigError, PipelineError, ShapeError
from .numerics import matmul, seeded_tensor

MAGIC_LATENT = b"MKLT"

TRAIN_STEPS = 1000
BETA_START = 1e-4
BETA_END = 2e-2


@dataclass
class LatentVideo:
    """Per-frame latent tensors, stored as one float32 array [N, C, h, w]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ShapeError(f"latents must be [N,C,h,w], got shape {self.data.shape}")
        n, _, h, w = self.data.shape
        if n < 1 or h < 4 or w < 4:
            raise ShapeError(f"need N >= 1 and h, w >= 4, got {self.data.shape}")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def tokens_per_frame(self) -> int:
        return self.height * self.width

    def tokens(self) -> np.ndarray:
        """Token view [N, h*w, C], spatial positions flattened row-major."""
        n, c, h, w = self.data.shape
        return np.ascontiguousarray(self.data.reshape(n, c, h * w).transpose(0, 2, 1))

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, height: int, width: int) -> "LatentVideo":
        n, hw, c = tokens.shape
        if hw != height * width:
            raise ShapeError(f"token count {hw} does not match {height}x{width}")
        return cls(tokens.transpose(0, 2, 1).reshape(n, c, height, width))


@dataclass(frozen=True)
class Schedule:
    """DDIM schedule over a linear-beta forward process.

    ``alpha_bar[t]`` is the cumulative signal level at train step t, with
    alpha_bar[0] == 1 by convention; ``timestep_map`` holds the sampled
    timesteps in descending order, so sampling walks the map left to right
    and inversion right to left (both evaluate the predictor at the
    higher timestep of each step pair).
    """

    train_steps: int
    sample_steps: int
    alpha_bar: np.ndarray
    timestep_map: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[t])


def make_schedule(sample_steps: int) -> Schedule:
    """Build the schedule: linear beta 1e-4 -> 2e-2 over 1000 train steps."""
    if not 1 <= sample_steps <= TRAIN_STEPS:
        raise ConfigError(f"sample_steps must be in [1, {TRAIN_STEPS}], got {sample_steps}")
    betas = np.linspace(BETA_START, BETA_END, TRAIN_STEPS, dtype=np.float64)
    alpha_bar = np.empty(TRAIN_STEPS + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - betas)
    ts = np.round(
        np.arange(sample_steps, 0, -1, dtype=np.float64) * (TRAIN_STEPS / sample_steps)
    ).astype(np.int64)
    return Schedule(
        train_steps=TRAIN_STEPS,
        sample_steps=sample_steps,
        alpha_bar=alpha_bar,
        timestep_map=ts,
    )


def _step(z: np.ndarray, eps: np.ndarray, t_from: int, t_to: int, schedule: Schedule) -> np.ndarray:
    """Shared deterministic DDIM update between any two timesteps."""
    if z.shape != eps.shape:
        raise ShapeError(f"latent/noise shapes differ: {z.shape} vs {eps.shape}")
    ab_from = schedule.alpha_bar_at(t_from)
    ab_to = schedule.alpha_bar_at(t_to)
    z64 = z.astype(np.float64)
    e64 = eps.astype(np.float64)
    x0 = (z64 - np.sqrt(1.0 - ab_from) * e64) / np.sqrt(ab_from)
    out = np.sqrt(ab_to) * x0 + np.sqrt(1.0 - ab_to) * e64
    return out.astype(np.float32)


def ddim_sample_step(
    z_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int, schedule: Schedule
) -> np.ndarray:
    """One deterministic (eta=0) denoising step from t down to t_prev."""
    if t <= t_prev:
        raise ConfigError(f"sampling requires t > t_prev, got {t} -> {t_prev}")
    return _step(z_t, eps, t, t_prev, schedule)


def ddim_invert_step(
    z_t: np.ndarray, eps: np.ndarray, t: int, t_next: int, schedule: Schedule
) -> np.ndarray:
    """One inversion step from t up to t_next (same update, ascending)."""
    if t_next <= t:
        raise ConfigError(f"inversion requires t_next > t, got {t} -> {t_next}")
    return _step(z_t, eps, t, t_next, schedule)


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(
            f"guidance shapes differ: {eps_uncond.shape} vs {eps_cond.shape}"
        )
    u = eps_uncond.astype(np.float64)
    c = eps_cond.astype(np.float64)
    return (u + float(scale) * (c - u)).astype(np.float32)


class AttentionCache:
    """Source Q/K per (timestep, self-attention layer) and conv features per timestep.

    Populated while inverting the source video; frozen before the denoising
    pass reads from it. Arrays are stored per frame: Q and K are
    [N, hw, d_k] and features are [N, hw, C].
    """

    def __init__(self):
        self._qk: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self._features: dict[int, np.ndarray] = {}
        self._frozen = False

    def record_qk(self, t: int, layer_id: int, q: np.ndarray, k: np.ndarray) -> None:
        if self._frozen:
            raise PipelineError("attention cache is frozen")
        self._qk[(int(t), int(layer_id))] = (
            np.array(q, dtype=np.float32, copy=True),
            np.array(k, dtype=np.float32, copy=True),
        )

    def record_features(self, t: int, features: np.ndarray) -> None:
        if self._frozen:
            raise PipelineError("attention cache is frozen")
        self._features[int(t)] = np.array(features, dtype=np.float32, copy=True)

    def freeze(self) -> None:
        self._frozen = True
        for q, k in self._qk.values():
            q.setflags(write=False)
            k.setflags(write=False)
        for f in self._features.values():
            f.setflags(write=False)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def qk(self, t: int, layer_id: int) -> tuple[np.ndarray, np.ndarray]:
        key = (int(t), int(layer_id))
        if key not in self._qk:
            raise PipelineError(f"no cached Q/K for timestep {t}, layer {layer_id}")
        return self._qk[key]

    def features(self, t: int) -> np.ndarray:
        if int(t) not in self._features:
            raise PipelineError(f"no cached features for timestep {t}")
        return self._features[int(t)]

    def timesteps(self) -> list[int]:
        return sorted(self._features)

    def entries_per_layer(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for _, layer_id in self._qk:
            counts[layer_id] = counts.get(layer_id, 0) + 1
        return counts

    def digest(self) -> str:
        """SHA-256 over a canonical serialization, for immutability checks."""
        h = hashlib.sha256()
        for (t, layer_id) in sorted(self._qk):
            q, k = self._qk[(t, layer_id)]
            h.update(struct.pack("<qq", t, layer_id))
            h.update(q.tobytes())
            h.update(k.tobytes())
        for t in sorted(self._features):
            h.update(struct.pack("<q", t))
            h.update(self._features[t].tobytes())
        return h.hexdigest()


def ddim_invert(
    z_0: LatentVideo,
    schedule: Schedule,
    predictor,
    cache_sink: AttentionCache | None = None,
) -> tuple[LatentVideo, AttentionCache | None]:
    """Run DDIM inversion from data to noise, populating the cache.

    The predictor is evaluated at the destination timestep of each step, so
    the recorded cache keys match the timesteps visited by ``ddim_sample``.
    Returns the terminal noise latent and the frozen cache.
    """
    ts_up = schedule.timestep_map[::-1]  # ascending
    z = z_0.data
    t_prev = 0
    for step_index, t in enumerate(ts_up):
        t = int(t)
        eps = predictor(z, t, step_index)
        if eps.shape != z.shape:
            raise PipelineError(
                f"predictor returned shape {eps.shape}, expected {z.shape} at t={t}"
            )
        z = ddim_invert_step(z, eps, t_prev, t, schedule)
        t_prev = t
    if cache_sink is not None:
        cache_sink.freeze()
    return LatentVideo(z), cache_sink


def ddim_sample(z_T: LatentVideo, schedule: Schedule, predictor) -> LatentVideo:
    """Run deterministic DDIM sampling from noise back to data."""
    ts_down = schedule.timestep_map
    z = z_T.data
    for step_index, t in enumerate(ts_down):
        t = int(t)
        t_prev = int(ts_down[step_index + 1]) if step_index + 1 < len(ts_down) else 0
        eps = predictor(z, t, step_index)
        if eps.shape != z.shape:
            raise PipelineError(
                f"predictor returned shape {eps.shape}, expected {z.shape} at t={t}"
            )
        z = ddim_sample_step(z, eps, t, t_prev, schedule)
    return LatentVideo(z)


def encode_frames(frames: np.ndarray, patch: int, channels: int, seed: int) -> LatentVideo:
    """Patchify RGB frames and project linearly into latent channels.

    ``frames`` is [N, H, W, 3] float32; the projection is a seeded fixed
    matrix with no bias, so all-zero input maps to all-zero latents.
    """
    frames = np.ascontiguousarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeError(f"frames must be [N,H,W,3], got {frames.shape}")
    n, height, width, _ = frames.shape
    if height % patch or width % patch:
        raise ShapeError(f"frame size {height}x{width} not divisible by patch {patch}")
    h, w = height // patch, width // patch
    proj = seeded_tensor([patch * patch * 3, channels], seed, label="frame-encoder")
    patches = (
        frames.reshape(n, h, patch, w, patch, 3)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n * h * w, patch * patch * 3)
    )
    tokens = matmul(patches, proj).reshape(n, h * w, channels)
    return LatentVideo.from_tokens(tokens, h, w)


def save_latents(path, video: LatentVideo) -> None:
    """Write latents in the MKLT binary format.

    Layout: magic ``MKLT`` then u32 N, C, h, w (little-endian) then the
    float32 little-endian payload in [N, C, h, w] order.
    """
    n, c, h, w = video.data.shape
    header = MAGIC_LATENT + struct.pack("<IIII", n, c, h, w)
    payload = video.data.astype("<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write latents: {exc}", path=str(path)) from exc


def load_latents(path) -> LatentVideo:
    """Read latents written by :func:`save_latents`."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read latents: {exc}", path=str(path)) from exc
    if len(blob) < 20 or blob[:4] != MAGIC_LATENT:
        raise ArtifactIOError("not an MKLT latent file", path=str(path))
    n, c, h, w = struct.unpack("<IIII", blob[4:20])
    expected = n * c * h * w * 4
    if len(blob) != 20 + expected:
        raise ArtifactIOError(
            f"latent payload truncated: expected {expected} bytes", path=str(path)
        )
    data = np.frombuffer(blob, dtype="<f4", offset=20).reshape(n, c, h, w)
    return LatentVideo(data.copy())
