"""Backend selection for the compiled kernels.

Set ``MCNCL_DISABLE_JIT=1`` to force the pure-numpy path even when numba is
installed. The choice is made once at import time.
"""
import os

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def dec(f):
            return f

        return dec if not args or not callable(args[0]) else dec(args[0])


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAS_NUMBA and not _flag("MCNCL_DISABLE_JIT")
BACKEND = "numba" if USE_NUMBA else "numpy"
