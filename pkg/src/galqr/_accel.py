"""Backend selection for the hot numeric kernels.

Numba is used when it imports cleanly and ``GALQR_DISABLE_NUMBA`` is unset
(or set to ``0``). Setting ``GALQR_DISABLE_NUMBA=1`` forces the pure-numpy
fallback everywhere, which is handy for debugging and for the benchmark.
"""
import os

_FLAG = os.environ.get("GALQR_DISABLE_NUMBA", "0").strip().lower()

try:  # pragma: no cover - exercised implicitly
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and _FLAG in ("", "0", "false", "no")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, identity decorator otherwise.

    Kernels are always compiled if numba is present so the benchmark can
    compare both paths in one process; ``USE_NUMBA`` only controls dispatch.
    """
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
