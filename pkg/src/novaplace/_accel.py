"""Backend switch for the hot kernels.

Set ``NOVA_DISABLE_NUMBA=1`` before import to force the pure-numpy path.
"""
import os

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("NOVA_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def njit(func):
    """Compile ``func`` with numba when available, otherwise return it unchanged."""
    if HAVE_NUMBA:
        return numba.njit(cache=True, fastmath=False)(func)
    return func


def backend():
    return "numba" if USE_NUMBA else "numpy"


def set_backend(name):
    global USE_NUMBA
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    USE_NUMBA = name == "numba"
