"""Backend switch for the numeric kernels.

Set ``DISKILL_NUMBA=0`` to force the pure-numpy path. Any other value (or
unset) uses numba when it can be imported.
"""
import os

_flag = os.environ.get("DISKILL_NUMBA", "1").strip().lower()
_requested = _flag not in ("0", "false", "no", "off")

try:
    from numba import njit as _numba_njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba_njit = None
    HAS_NUMBA = False

USE_NUMBA = _requested and HAS_NUMBA


def njit(fn):
    """``numba.njit(cache=True)`` when numba is available, else identity."""
    if HAS_NUMBA:
        return _numba_njit(cache=True)(fn)
    return fn
