"""Optional numba acceleration.

Set ``MCSEP_DISABLE_NUMBA=1`` before import to force the pure-numpy kernels.
"""
import os

try:
    from numba import njit

    NUMBA_INSTALLED = True
except ImportError:  # pragma: no cover
    NUMBA_INSTALLED = False

USE_NUMBA = NUMBA_INSTALLED and os.environ.get("MCSEP_DISABLE_NUMBA", "0").lower() not in (
    "1",
    "true",
    "yes",
)


def optional_njit(*args, **kwargs):
    """``numba.njit`` whenever numba is importable, identity otherwise.

    Compilation is lazy, so a disabled backend never compiles anything.
    """

    def decorator(func):
        if NUMBA_INSTALLED:
            return njit(*args, **kwargs)(func)
        return func

    return decorator
