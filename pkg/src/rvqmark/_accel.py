"""Numba switch for the hot kernels.

Set ``RVQMARK_DISABLE_NUMBA=1`` before import to run every kernel through its
pure numpy / python path. Both paths produce identical results.
"""
import os

_DISABLED = os.environ.get("RVQMARK_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    njit = None
    HAS_NUMBA = False


def jit(fn):
    """Compile ``fn`` in nopython mode when numba is active, else return it untouched."""
    if HAS_NUMBA:
        return njit(cache=True, nogil=True)(fn)
    return fn
