"""Process-wide determinism controls: worker count and BLAS thread limits."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from threadpoolctl import threadpool_limits

THREADS_ENV = "PERMBASIN_THREADS"

_workers = 1
_limiter = None


def set_threads(n: int) -> None:
    """``n == 1`` gives bit-reproducible single-threaded runs; ``n > 1`` evaluates
    independent grid points / report rows concurrently with ordered merges."""
    global _workers, _limiter
    if n < 1:
        raise ValueError("threads must be >= 1")
    _workers = int(n)
    # BLAS stays single-threaded either way; parallelism is across independent evaluations
    _limiter = threadpool_limits(limits=1)


def workers() -> int:
    return _workers


def threads_from_env(default: int = 1) -> int:
    return int(os.environ.get(THREADS_ENV, default))


def pmap(fn, items) -> list:
    """``map`` whose results come back in input order, threaded when workers() > 1."""
    items = list(items)
    if _workers <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(_workers) as pool:
        return list(pool.map(fn, items))
