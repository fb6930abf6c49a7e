"""Worker-count handling and order-preserving parallel map."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_THREADS = "KINFLOW_THREADS"


def worker_count() -> int:
    raw = os.environ.get(ENV_THREADS)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_THREADS} must be a positive integer, got {raw!r}")
        if n < 1:
            raise ValueError(f"{ENV_THREADS} must be a positive integer, got {raw!r}")
        return n
    return os.cpu_count() or 1


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int | None = None) -> List[R]:
    """Map ``fn`` over ``items`` and return results in input order.

    Results never depend on the worker count: each item is computed
    independently and the output list is assembled by index.
    """
    items = list(items)
    n = worker_count() if workers is None else workers
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
