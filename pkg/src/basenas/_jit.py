"""Backend selection for the hot kernels.

Set ``BASENAS_BACKEND=numpy`` to force the pure-numpy path. Anything else
(or unset) uses numba when it imports cleanly.
"""
import os

try:
    import numba as nb

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

BACKEND = os.environ.get("BASENAS_BACKEND", "numba").strip().lower()
USE_NUMBA = _HAVE_NUMBA and BACKEND != "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise the identity decorator."""
    if _HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        kwargs.setdefault("fastmath", {"reassoc", "contract", "nsz"})
        return nb.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda func: func
