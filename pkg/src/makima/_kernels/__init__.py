"""Backend selection for the hot dense kernels.

The compiled Cython core is preferred when built; a NumPy fallback is used
otherwise. MAKIMA_BACKEND=python|compiled forces the choice (``compiled``
raises if the extension is missing). Both backends share the same contract:
float32 in, float32 out, float64 accumulation.
"""

import os

from . import _pyref

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

_requested = os.environ.get("MAKIMA_BACKEND", "auto")
if _requested == "python":
    _active = _pyref
elif _requested == "compiled":
    if _core is None:
        raise ImportError(
            "MAKIMA_BACKEND=compiled but the makima._kernels._core extension "
            "is not built; install with the Cython toolchain available"
        )
    _active = _core
elif _requested == "auto":
    _active = _core if _core is not None else _pyref
else:
    raise ImportError(f"unknown MAKIMA_BACKEND value: {_requested!r}")

BACKEND = _active.NAME

matmul = _active.matmul
softmax_rows = _active.softmax_rows


def available_backends():
    """Backend modules importable in this process, keyed by name."""
    out = {_pyref.NAME: _pyref}
    if _core is not None:
        out[_core.NAME] = _core
    return out
