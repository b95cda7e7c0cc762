"""Numba switch.

Set ``XPFL_DISABLE_JIT=1`` to force the pure-numpy kernels. When numba is
missing the numpy path is used automatically. Compilation is lazy, so the
jitted variants cost nothing unless they are called.
"""

import logging
import os

logger = logging.getLogger(__name__)

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba ships with the package deps
    numba = None
    HAVE_NUMBA = False


def _env_disabled():
    return os.environ.get("XPFL_DISABLE_JIT", "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def njit(func):
    """``numba.njit(cache=True)`` when numba is importable, else ``None``."""
    if not HAVE_NUMBA:
        return None
    return numba.njit(cache=True)(func)


def backend():
    return "numba" if USE_NUMBA else "numpy"
