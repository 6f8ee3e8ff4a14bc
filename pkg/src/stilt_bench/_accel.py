"""Numba switch.

Hot kernels are compiled with ``numba.njit`` when numba is importable and the
environment variable ``STILT_BENCH_DISABLE_NUMBA`` is unset (or ``0``).
Otherwise every kernel runs through its pure-numpy twin.
"""

import os

_flag = os.environ.get("STILT_BENCH_DISABLE_NUMBA", "0").strip().lower()

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba ships with the env
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _flag in ("", "0", "false", "no")


def njit(*args, **kwargs):
    """``numba.njit`` if enabled, identity decorator otherwise."""
    if USE_NUMBA:
        from numba import njit as _njit

        kwargs.setdefault("cache", True)
        return _njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
