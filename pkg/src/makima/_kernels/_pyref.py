"""NumPy fallback for the compiled kernel core.

Both backends take float32 C-contiguous arrays, accumulate in float64 and
round the result to float32. Used automatically when the Cython extension
is not built (or when MAKIMA_BACKEND=python).
"""

import numpy as np

NAME = "python"


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """float32 matrix product with float64 accumulation."""
    out = a.astype(np.float64) @ b.astype(np.float64)
    return out.astype(np.float32)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction, float64 internally."""
    x64 = x.astype(np.float64)
    x64 -= x64.max(axis=1, keepdims=True)
    np.exp(x64, out=x64)
    x64 /= x64.sum(axis=1, keepdims=True)
    return x64.astype(np.float32)
