"""Backend switch for the hot kernels.

Numba is used when it imports cleanly and ``CHANNELKIT_DISABLE_NUMBA`` is not
set to a truthy value; otherwise every kernel runs its pure-numpy twin.  The
flag is read once, at import time.
"""

from __future__ import annotations

import os
from typing import Any, Callable

_FLAG = os.environ.get("CHANNELKIT_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by CHANNELKIT_DISABLE_NUMBA")
    import numba
    from numba import njit as _numba_njit, prange

    # the bundled TBB is too old; omp/workqueue need no extra runtime
    if os.environ.get("NUMBA_THREADING_LAYER") is None:
        numba.config.THREADING_LAYER = "workqueue"

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False
    prange = range


def njit(**options: Any) -> Callable[[Callable], Callable]:
    """``numba.njit(cache=True, **options)`` or the identity when numba is off."""
    if not HAVE_NUMBA:
        return lambda f: f
    options.setdefault("cache", True)
    return _numba_njit(**options)


def backend_name() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


def set_num_threads(n: int) -> int:
    """Cap kernel worker threads; returns the value actually applied."""
    if n < 1:
        raise ValueError(f"thread count must be positive, got {n}")
    if not HAVE_NUMBA:
        return 1
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n
