"""Switch between numba-compiled kernels and the pure-numpy fallbacks.

Set ``SOCLM_PURE_NUMPY=1`` in the environment to disable numba entirely. The
flag is read once at import time.
"""
import os

_FLAG = os.environ.get("SOCLM_PURE_NUMPY", "").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")

if HAVE_NUMBA and "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    # prefer OpenMP; older TBB builds only produce a warning before falling through
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


_threads = None


def set_threads(n: int) -> None:
    """Cap numba's worker count. Single-thread runs leave the pool untouched."""
    global _threads
    if not HAVE_NUMBA or n < 1 or n == _threads or (_threads is None and n == 1):
        return
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    _threads = n


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
