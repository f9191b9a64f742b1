"""Backend selection for the hot numeric kernels.

Two interchangeable paths exist for every hot kernel: a numba @njit build
and a pure-numpy (or plain Python) fallback. The fallback is selected with

    NORMSHAPE_NUMBA=0

in the environment, or automatically when numba is not importable. The
choice is made once at import time; `benchmarks/bench_kernels.py` compares
the two paths on realistic workloads.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("NORMSHAPE_NUMBA", "1") != "0"

if USE_NUMBA:
    from numba import prange
else:
    prange = range


def maybe_njit(*args, **kwargs):
    """@njit when the numba backend is active, identity decorator otherwise."""

    def wrap(fn):
        if USE_NUMBA:
            return numba.njit(*args, cache=True, **kwargs)(fn)
        return fn

    return wrap


def set_threads(n: int) -> None:
    if USE_NUMBA and n > 0:
        numba.set_num_threads(n)
