"""Worker-count control shared by the CLI and the library.

Work is split only across independent items (images, files) and results
are gathered in input order, so the worker count never changes a result.
BLAS itself stays single-threaded: a multi-threaded GEMM may split its
reductions differently depending on the thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

from threadpoolctl import threadpool_limits

T = TypeVar("T")
R = TypeVar("R")

_threads = {"n": None, "limiter": None}


def default_threads() -> int:
    env = os.environ.get("TFMAN_THREADS")
    return max(1, int(env)) if env else 1


def set_threads(n: int | None) -> int:
    n = default_threads() if n is None else max(1, int(n))
    _threads["n"] = n
    _threads["limiter"] = threadpool_limits(limits=1)
    return n


def threads() -> int:
    return _threads["n"] or default_threads()


def map_ordered(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    items = list(items)
    n = threads()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
