"""Keyframe selection and consistency-weighted feature propagation.

Keyframes are the subset of frames whose minimum pairwise cosine distance
is maximal. The optimum is found by binary search over the sorted pairwise
distances with an exact lexicographic feasibility search, so the result
always matches brute-force enumeration, with ties broken toward lower
frame indices. Non-keyframes receive a convex blend of the two nearest
keyframes' attention outputs, weighted by feature similarity and temporal
distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PropagationError
from .numerics import cosine_distance

SIGMA_MODES = ("logistic", "identity")


@dataclass
class PlanRow:
    """Blending record for one non-keyframe at one step."""

    frame: int
    k1: int
    k2: int
    w1: float
    d1: int
    d2: int
    sim1: float
    sim2: float
    w_temp: float


@dataclass
class StepPlan:
    step_index: int
    keyframes: tuple[int, ...]
    rows: list[PlanRow] = field(default_factory=list)


@dataclass
class KeyframePlan:
    """Per-step keyframe choices plus blending triples for non-keyframes."""

    steps: list[StepPlan] = field(default_factory=list)

    def lines(self) -> list[str]:
        """Line-oriented dump: ``step <i> <idx...>`` then ``frame <i> <k1> <k2> <w1>``."""
        out = []
        for sp in self.steps:
            out.append("step " + " ".join(str(v) for v in (sp.step_index, *sp.keyframes)))
            for row in sp.rows:
                out.append(f"frame {row.frame} {row.k1} {row.k2} {row.w1:.9g}")
        return out


def _pairwise_distances(features: np.ndarray) -> np.ndarray:
    n = features.shape[0]
    dist = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = cosine_distance(features[i], features[j])
    return dist


def _first_feasible_subset(dist: np.ndarray, k: int, theta: float) -> list[int] | None:
    """Lexicographically smallest k-subset with all pairwise distances >= theta."""
    n = dist.shape[0]
    chosen: list[int] = []

    def dfs(start: int) -> bool:
        if len(chosen) == k:
            return True
        for cand in range(start, n):
            if n - cand < k - len(chosen):
                return False
            if all(dist[cand, c] >= theta for c in chosen):
                chosen.append(cand)
                if dfs(cand + 1):
                    return True
                chosen.pop()
        return False

    return chosen if dfs(0) else None


def select_keyframes(features: np.ndarray, k: int) -> list[int]:
    """Size-k subset maximizing the minimum pairwise cosine distance.

    Binary search over the sorted distinct pairwise distances; feasibility
    at each threshold is decided exactly, so the returned subset attains the
    brute-force optimum. Ties resolve to the lexicographically smallest
    subset; k == 1 returns [0].
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ConfigError(f"features must be [N,d], got shape {features.shape}")
    n = features.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= k <= {n}, got k={k}")
    if k == 1:
        return [0]
    dist = _pairwise_distances(features)
    values = np.unique(dist[np.triu_indices(n, k=1)])
    lo, hi = 0, len(values) - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if _first_feasible_subset(dist, k, float(values[mid])) is not None:
            lo = mid
        else:
            hi = mid - 1
    subset = _first_feasible_subset(dist, k, float(values[lo]))
    assert subset is not None  # threshold 0 is always feasible
    return subset


def diversity_ranking(features: np.ndarray, prefix_k: int) -> list[int]:
    """Full frame ordering: optimal prefix, then farthest-point extension.

    The first ``prefix_k`` entries are the optimal keyframe subset; the rest
    follow greedily by maximal distance to everything already ranked, ties
    toward lower indices.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    prefix_k = min(prefix_k, n)
    ranked = select_keyframes(features, prefix_k)
    dist = _pairwise_distances(features)
    remaining = [i for i in range(n) if i not in ranked]
    while remaining:
        best = max(remaining, key=lambda r: (min(dist[r, s] for s in ranked), -r))
        ranked.append(best)
        remaining.remove(best)
    return ranked


def per_step_keyframe_rotation(
    ranking: list[int], step_index: int, count: int = 3
) -> tuple[int, ...]:
    """Deterministic rotation through the diversity ranking.

    Selects ``count`` consecutive ranking entries cyclically offset by the
    step index, so every frame serves as a keyframe across enough steps.
    """
    n = len(ranking)
    if not 1 <= count <= n:
        raise ConfigError(f"keyframe count {count} outside [1, {n}]")
    offset = step_index % n
    return tuple(sorted(ranking[(offset + j) % n] for j in range(count)))


def nearest_keyframes(i: int, keyframes) -> tuple[int, int, int, int]:
    """Two blending keyframes for frame i with their frame distances.

    k1 is the nearest keyframe below i (nearest overall when none exists);
    k2 is the nearest keyframe above i excluding k1 (second-nearest overall
    otherwise). Ties resolve toward lower indices.
    """
    keys = sorted(set(int(k) for k in keyframes))
    if len(keys) < 2:
        raise PropagationError("nearest_keyframes needs at least two keyframes")
    if i in keys:
        raise PropagationError(f"frame {i} is itself a keyframe")
    below = [k for k in keys if k < i]
    if below:
        k1 = max(below)
    else:
        k1 = min(keys, key=lambda k: (abs(k - i), k))
    above = [k for k in keys if k > i and k != k1]
    if above:
        k2 = min(above)
    else:
        k2 = min((k for k in keys if k != k1), key=lambda k: (abs(k - i), k))
    return k1, k2, abs(i - k1), abs(i - k2)


def propagation_weight_details(
    d1: float, d2: float, sim1: float, sim2: float, mode: str = "logistic"
) -> tuple[float, float, bool]:
    """Blend weight plus the temporal prior and a degenerate-denominator flag.

    Negative similarities are clamped to zero so the ratio stays in [0, 1];
    a vanishing denominator falls back to the pure temporal weight.
    """
    if mode not in SIGMA_MODES:
        raise ConfigError(f"sigma mode must be one of {SIGMA_MODES}, got {mode!r}")
    if d1 < 0 or d2 < 0 or d1 + d2 <= 0:
        raise ConfigError(f"need nonnegative distances with d1+d2 > 0, got {d1}, {d2}")
    if abs(sim1) > 1 + 1e-9 or abs(sim2) > 1 + 1e-9:
        raise ConfigError("similarities must lie in [-1, 1]")
    w_temp = d2 / (d1 + d2)
    s1 = max(0.0, float(sim1))
    s2 = max(0.0, float(sim2))
    denominator = w_temp * s1 + (1.0 - w_temp) * s2
    if denominator <= 1e-8:
        return w_temp, w_temp, True
    r = w_temp * s1 / denominator
    w1 = 1.0 / (1.0 + math.exp(-r)) if mode == "logistic" else r
    return w1, w_temp, False


def propagation_weight(
    d1: float, d2: float, sim1: float, sim2: float, mode: str = "logistic"
) -> float:
    """Consistency-oriented blend weight for the nearer keyframe."""
    w1, _, _ = propagation_weight_details(d1, d2, sim1, sim2, mode)
    return w1


def blend_attention(out_k1: np.ndarray, out_k2: np.ndarray, w1: float) -> np.ndarray:
    """Token-wise convex combination of two keyframes' attention outputs."""
    a = np.asarray(out_k1)
    b = np.asarray(out_k2)
    if a.shape != b.shape:
        raise PropagationError(f"blend shapes differ: {a.shape} vs {b.shape}")
    if not 0.0 <= w1 <= 1.0:
        raise PropagationError(f"blend weight {w1} outside [0, 1]")
    if w1 == 1.0:
        return a.copy()
    if w1 == 0.0:
        return b.copy()
    w = np.float32(w1)
    return (w * a + (np.float32(1.0) - w) * b).astype(a.dtype)
