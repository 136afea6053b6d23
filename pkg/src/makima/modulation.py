"""Mask machinery and attention-score modulation.

Binary attribute masks are downsampled to each attention resolution, turned
into correspondence matrices (same-attribute pairs vs. pairs leaking across
the mask boundary), and converted into an additive pre-softmax delta scaled
by the strongest in-mask score, a linear timestep decay and the masked-area
fraction. Token ordering everywhere is row-major spatial flattening with
frames concatenated in index order, matching the attention key layout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

LAMBDA_DENOMINATOR = 1000.0


class OverlappingAttributeWarning(UserWarning):
    """Two attributes modulate the same query/key entries; deltas are summed."""


@dataclass
class ModulationConfig:
    """Strength knobs: per-kind scale, timestep decay base, master switch."""

    gamma_self: float = 0.1
    gamma_cross: float = 1.0
    lambda_denominator: float = LAMBDA_DENOMINATOR
    enabled: bool = True

    def __post_init__(self):
        if self.gamma_self < 0 or self.gamma_cross < 0:
            raise ShapeError("modulation scales must be nonnegative")


@dataclass
class ModulationDelta:
    """Additive pre-softmax term: [hw, N*hw] for self, [hw, L] for cross."""

    kind: str
    matrix: np.ndarray


class MaskSet:
    """Per-attribute, per-frame binary masks plus downsampled variants.

    ``source`` is a uint8 array [M, N, H, W] with values in {0, 1}; the
    per-resolution cache holds flattened float32 masks [M, N, h*w].
    """

    def __init__(self, source: np.ndarray):
        source = np.asarray(source)
        if source.ndim != 4:
            raise ShapeError(f"masks must be [M,N,H,W], got shape {source.shape}")
        if not np.isin(source, (0, 1)).all():
            raise ShapeError("mask values must be 0 or 1")
        self.source = source.astype(np.uint8)
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def attributes(self) -> int:
        return self.source.shape[0]

    @property
    def frames(self) -> int:
        return self.source.shape[1]

    def at_resolution(self, h: int, w: int) -> np.ndarray:
        """Flattened binary masks [M, N, h*w] at an attention resolution."""
        key = (h, w)
        if key not in self._cache:
            m_count, n, _, _ = self.source.shape
            out = np.empty((m_count, n, h * w), dtype=np.float32)
            for m in range(m_count):
                for i in range(n):
                    out[m, i] = downsample_mask(self.source[m, i], (h, w)).ravel()
            out.setflags(write=False)
            self._cache[key] = out
        return self._cache[key]


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Block-average a binary mask and threshold at 0.5 (ties round to 1)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    big_h, big_w = mask.shape
    h, w = target
    if big_h < h or big_w < w or big_h % h or big_w % w:
        raise ShapeError(f"cannot downsample {big_h}x{big_w} to {h}x{w}")
    fh, fw = big_h // h, big_w // w
    blocks = mask.astype(np.float64).reshape(h, fh, w, fw).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(np.float32)


def self_correspondence(
    mask_i: np.ndarray, masks_all: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Same-attribute and leak correspondence matrices for self-attention.

    ``mask_i`` is the query frame's flattened mask [hw]; ``masks_all`` holds
    every frame's flattened mask [N, hw] in key order. E marks query/key
    pairs inside the attribute in both frames; E_bar marks keys inside the
    attribute seen from queries outside it.
    """
    m_i = np.asarray(mask_i, dtype=np.float32).ravel()
    m_all = np.asarray(masks_all, dtype=np.float32).reshape(-1)
    e = np.outer(m_i, m_all).astype(np.float32)
    e_bar = np.outer(1.0 - m_i, m_all).astype(np.float32)
    return e, e_bar


def cross_correspondence(
    mask_i: np.ndarray, indicator: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Spatial-token correspondences for cross-attention.

    ``indicator`` is the binary token vector [L] marking one attribute's
    prompt tokens.
    """
    m_i = np.asarray(mask_i, dtype=np.float32).ravel()
    ind = np.asarray(indicator, dtype=np.float32).ravel()
    e = np.outer(m_i, ind).astype(np.float32)
    e_bar = np.outer(1.0 - m_i, ind).astype(np.float32)
    return e, e_bar


def alpha_max(raw_scores: np.ndarray, e: np.ndarray) -> float:
    """Strongest raw score inside the correspondence support; 0 if empty."""
    raw = np.asarray(raw_scores)
    e = np.asarray(e)
    if raw.shape != e.shape:
        raise ShapeError(f"score/correspondence shapes differ: {raw.shape} vs {e.shape}")
    hits = e > 0
    if not hits.any():
        return 0.0
    return float(raw[hits].max())


def delta_attn(e: np.ndarray, e_bar: np.ndarray, alpha: float) -> np.ndarray:
    """Signed modulation term: enhance inside the attribute, suppress leaks."""
    if e.shape != e_bar.shape:
        raise ShapeError(f"E/E_bar shapes differ: {e.shape} vs {e_bar.shape}")
    return (float(alpha) * (e.astype(np.float64) - e_bar.astype(np.float64))).astype(
        np.float32
    )


def mask_area_ratio(mask_i: np.ndarray, token_count: int) -> float:
    """Fraction of tokens covered by the mask, in [0, 1]."""
    m_i = np.asarray(mask_i).ravel()
    if len(m_i) != token_count:
        raise ShapeError(f"mask has {len(m_i)} tokens, expected {token_count}")
    return float(m_i.sum(dtype=np.float64) / token_count)


def regularize(delta: np.ndarray, gamma: float, t: int, omega: float) -> np.ndarray:
    """Scale a raw delta by gamma * (t / 1000) * (1 - omega).

    The timestep factor fades modulation out as denoising approaches t=0;
    the area factor damps large attributes.
    """
    if not 0 <= t <= LAMBDA_DENOMINATOR:
        raise ShapeError(f"timestep {t} outside [0, {int(LAMBDA_DENOMINATOR)}]")
    if not 0.0 <= omega <= 1.0:
        raise ShapeError(f"area ratio {omega} outside [0, 1]")
    lam = float(t) / LAMBDA_DENOMINATOR
    scale = float(gamma) * lam * (1.0 - float(omega))
    return (np.asarray(delta, dtype=np.float64) * scale).astype(np.float32)


def _warn_overlap(kind: str) -> None:
    warnings.warn(
        f"attribute supports overlap in {kind} modulation; deltas are summed",
        OverlappingAttributeWarning,
        stacklevel=3,
    )


def build_self_delta(
    raw_scores: np.ndarray,
    masks: np.ndarray,
    frame_i: int,
    config: ModulationConfig,
    t: int,
    counters: dict | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Summed self-attention delta over all attributes for one query frame.

    ``raw_scores`` is the unscaled Q K^T matrix [hw, N*hw]; ``masks`` holds
    the flattened per-attribute masks [M, N, hw] at this resolution.
    Returns the delta plus the per-attribute alpha values for diagnostics.
    """
    m_count, n, hw = masks.shape
    raw = np.asarray(raw_scores)
    if raw.shape != (hw, n * hw):
        raise ShapeError(f"raw scores {raw.shape} do not match masks {(hw, n * hw)}")
    delta = np.zeros((hw, n * hw), dtype=np.float64)
    key_support = np.zeros(n * hw, dtype=bool)
    alphas: list[float] = []
    overlap = False
    for m in range(m_count):
        e, e_bar = self_correspondence(masks[m, frame_i], masks[m])
        if counters is not None and not (e > 0).any():
            counters["empty_mask_attribute"] = counters.get("empty_mask_attribute", 0) + 1
        alpha = alpha_max(raw, e)
        alphas.append(alpha)
        omega = mask_area_ratio(masks[m, frame_i], hw)
        term = regularize(delta_attn(e, e_bar, alpha), config.gamma_self, t, omega)
        delta += term.astype(np.float64)
        if alpha != 0.0:
            support = masks[m].reshape(-1) > 0
            if (key_support & support).any():
                overlap = True
            key_support |= support
    if overlap:
        _warn_overlap("self")
        if counters is not None:
            counters["overlapping_supports"] = counters.get("overlapping_supports", 0) + 1
    return delta.astype(np.float32), alphas


def build_cross_delta(
    raw_scores: np.ndarray,
    mask_frame: np.ndarray,
    indicators: np.ndarray,
    config: ModulationConfig,
    t: int,
    counters: dict | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Summed cross-attention delta over all attributes for one frame.

    ``raw_scores`` is the unscaled Q K^T matrix [hw, L]; ``mask_frame``
    holds this frame's flattened masks [M, hw]; ``indicators`` the binary
    token vectors [M, L].
    """
    m_count, hw = np.asarray(mask_frame).shape
    indicators = np.asarray(indicators, dtype=np.float32)
    length = indicators.shape[1]
    raw = np.asarray(raw_scores)
    if raw.shape != (hw, length):
        raise ShapeError(f"raw scores {raw.shape} do not match ({hw}, {length})")
    delta = np.zeros((hw, length), dtype=np.float64)
    token_support = np.zeros(length, dtype=bool)
    alphas: list[float] = []
    overlap = False
    if indicators.shape[0] != m_count:
        raise ShapeError(
            f"{indicators.shape[0]} indicators for {m_count} attribute masks"
        )
    for m in range(m_count):
        e, e_bar = cross_correspondence(mask_frame[m], indicators[m])
        if counters is not None and not (e > 0).any():
            counters["empty_mask_attribute"] = counters.get("empty_mask_attribute", 0) + 1
        alpha = alpha_max(raw, e)
        alphas.append(alpha)
        omega = mask_area_ratio(mask_frame[m], hw)
        term = regularize(delta_attn(e, e_bar, alpha), config.gamma_cross, t, omega)
        delta += term.astype(np.float64)
        if alpha != 0.0:
            support = indicators[m] > 0
            if (token_support & support).any():
                overlap = True
            token_support |= support
    if overlap:
        _warn_overlap("cross")
        if counters is not None:
            counters["overlapping_supports"] = counters.get("overlapping_supports", 0) + 1
    return delta.astype(np.float32), alphas
