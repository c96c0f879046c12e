"""JIT selection for the numeric kernels.

Kernels are written in the numba-compatible subset of Python and compiled
with ``numba.njit`` unless ``RETFLIP_NO_JIT=1`` is set, in which case the
very same functions run as plain Python over numpy arrays.
"""

import os

JIT_DISABLED = os.environ.get("RETFLIP_NO_JIT", "0").lower() in ("1", "true", "yes")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USING_JIT = (_numba is not None) and not JIT_DISABLED


def kernel(fn):
    """Compile ``fn`` with numba (nogil, cached) or return it unchanged."""
    if not USING_JIT:
        fn.py_func = fn
        return fn
    compiled = _numba.njit(cache=True, nogil=True)(fn)
    return compiled


def backend_name():
    return "numba" if USING_JIT else "python"
