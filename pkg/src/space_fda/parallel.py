"""Thread-count resolution and an order-preserving parallel map."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

ENV_THREADS = "SPACE_FDA_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def worker_count(explicit: int | None = None) -> int:
    """Resolve the worker count: explicit argument, then the environment
    variable, then 1. Never less than 1."""
    if explicit is not None:
        return max(1, int(explicit))
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            return 1
    return 1


def parallel_map(fn: Callable[[T], R], items: Sequence[T] | Iterable[T],
                 threads: int | None = None) -> list[R]:
    """Map ``fn`` over ``items``, preserving input order.

    Work items must be independent; with ``threads`` <= 1 this is a plain
    loop, otherwise a thread pool (numpy releases the GIL in kernels, so
    threads give real speedup for array-heavy work).
    """
    items = list(items)
    n = worker_count(threads)
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
