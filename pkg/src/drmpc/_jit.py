"""Numba switch.

Set ``DRMPC_DISABLE_NUMBA=1`` before import to run every hot kernel on its
pure-numpy path. If numba is not installed the numpy path is used as well.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

DISABLE_ENV = "DRMPC_DISABLE_NUMBA"

_disabled = os.environ.get(DISABLE_ENV, "0").strip().lower() in {"1", "true", "yes", "on"}

USE_NUMBA = numba is not None and not _disabled


def njit(func):
    """Compile ``func`` with numba when available, else return it unchanged."""
    if numba is None:
        return func
    return numba.njit(cache=True, nogil=True)(func)
