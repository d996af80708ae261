"""Optional numba acceleration.

Set ``MEMVI_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when numba
is importable.
"""
import os

_disabled = os.environ.get("MEMVI_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _disabled:
        raise ImportError("numba disabled by MEMVI_DISABLE_NUMBA")
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:
    _njit = None
    HAVE_NUMBA = False


def njit(func):
    """Compile ``func`` in nopython mode, or return it untouched without numba."""
    if _njit is None:
        return func
    return _njit(cache=True, nogil=True)(func)
