"""Dense-tensor primitives every other module builds on.

Tensors are plain ``numpy.ndarray`` objects with dtype float32. All public
operations are pure functions, accumulate in float64 where it matters, and
are bit-reproducible: the seeded initializer uses the Philox counter-based
generator, and the matmul/softmax kernels use a fixed accumulation order
(see ``makima._kernels``).
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import _kernels
from .errors import DegenerateVectorError, NumericError, ShapeError

__all__ = [
    "as_f32_matrix",
    "cosine_distance",
    "cosine_similarity",
    "label_tag",
    "matmul",
    "philox_generator",
    "seeded_tensor",
    "softmax_rows",
]


def as_f32_matrix(x, name: str = "array") -> np.ndarray:
    """Coerce to a C-contiguous float32 2-D array."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product [R,D] x [D,C] -> [R,C] in float32.

    Accumulates in float64 with a fixed summation order so repeated calls
    are bit-identical.
    """
    a = as_f32_matrix(a, "a")
    b = as_f32_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return _kernels.matmul(a, b)


def softmax_rows(scores) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    Each output row is nonnegative and sums to 1 within 1e-6.
    """
    scores = as_f32_matrix(scores, "scores")
    if not np.isfinite(scores).all():
        raise NumericError("softmax input contains non-finite values")
    return _kernels.softmax_rows(scores)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two nonzero vectors, computed in float64."""
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    if av.shape != bv.shape:
        raise ShapeError(f"vector lengths differ: {av.shape} vs {bv.shape}")
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    return float(av @ bv) / (na * nb)


def cosine_distance(a, b) -> float:
    """1 - cosine similarity, in [0, 2]."""
    return 1.0 - cosine_similarity(a, b)


def label_tag(label: str) -> int:
    """Stable 64-bit tag for a stream label (blake2b, platform independent)."""
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def philox_generator(seed: int, label: str = "") -> np.random.Generator:
    """Counter-based generator keyed by (seed, label).

    Philox streams are reproducible bit-for-bit across platforms, and
    distinct labels give independent streams under the same seed.
    """
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(label_tag(label))])
    return np.random.Generator(np.random.Philox(key=key))


def seeded_tensor(shape, seed: int, label: str = "") -> np.ndarray:
    """Deterministic standard-normal tensor scaled by 1/sqrt(fan_in).

    fan_in is the leading dimension for matrices (the input dimension under
    the ``x @ W`` convention used throughout) and 1 for vectors. Identical
    (shape, seed, label) triples produce bit-identical float32 output on
    every platform.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("seeded_tensor needs a nonempty shape")
    if any(s <= 0 for s in shape):
        raise ShapeError(f"all dimensions must be positive, got {shape}")
    gen = philox_generator(seed, label)
    fan_in = shape[0] if len(shape) >= 2 else 1
    data = gen.standard_normal(int(np.prod(shape)), dtype=np.float32)
    scale = np.float32(1.0 / np.sqrt(fan_in))
    return (data * scale).reshape(shape)
