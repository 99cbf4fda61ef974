"""Optional numba acceleration.

Hot kernels are written once as plain loops and compiled with ``njit`` when
numba is importable and ``HD3D_DISABLE_NUMBA`` is unset.  Each kernel module
also carries a pure-numpy path which is used when compilation is off, so
both paths can be timed and cross-checked in the same process.
"""
import os

try:
    import numba
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    _HAVE_NUMBA = False

DISABLE_ENV = "HD3D_DISABLE_NUMBA"
THREADS_ENV = "HD3D_THREADS"


def _flag(name):
    return os.environ.get(name, "").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = _HAVE_NUMBA and not _flag(DISABLE_ENV)


def optional_njit(*args, **kwargs):
    """``numba.njit`` if available, else a no-op decorator.

    Unlike the selection done via ``USE_NUMBA``, this always compiles when
    numba is installed; kernels decide at call sites which path to take.
    """
    def decorator(func):
        if _HAVE_NUMBA:
            return numba.njit(*args, **kwargs)(func)
        return func

    if len(args) == 1 and callable(args[0]) and not kwargs:
        func = args[0]
        args = ()
        return decorator(func)
    return decorator


def set_threads(n=None):
    """Cap numba and BLAS worker counts. ``None`` reads ``HD3D_THREADS``."""
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return
        n = int(env)
    n = max(1, int(n))
    if _HAVE_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(n)
    except ImportError:  # pragma: no cover
        pass
