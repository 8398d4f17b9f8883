"""Ordered map over independent tasks, optionally across processes.

Task results are returned in submission order, so any reduction over them is
independent of the worker count.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "SILTLAB_THREADS"


def worker_count(workers: Optional[int] = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def ordered_map(fn: Callable[[T], R], tasks: Iterable[T], workers: Optional[int] = None) -> list[R]:
    tasks = list(tasks)
    nw = worker_count(workers)
    if nw == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=nw) as pool:
        return list(pool.map(fn, tasks))
