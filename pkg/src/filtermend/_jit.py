"""Backend selection for the hot kernels.

Numba is used when importable unless ``FILTERMEND_DISABLE_JIT=1`` is set,
in which case every kernel dispatches to its vectorized numpy twin.
"""
import os

try:
    import numba as nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba ships as the optional "jit" extra
    nb = None
    HAVE_NUMBA = False


def _env_disabled():
    return os.environ.get("FILTERMEND_DISABLE_JIT", "0").strip().lower() in ("1", "true", "yes")


USE_JIT = HAVE_NUMBA and not _env_disabled()


def njit(*args, **kwargs):
    """``numba.njit`` with cache on; identity decorator when numba is missing."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda func: func
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return nb.njit(*args, **kwargs)


def backend_name():
    return "numba" if USE_JIT else "numpy"
