"""Process-wide helpers: worker-count policy and an order-preserving map."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Worker cap from HAZECRAFT_THREADS; 0 or unset means auto (CPU count)."""
    raw = os.environ.get("HAZECRAFT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"HAZECRAFT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"HAZECRAFT_THREADS must be >= 0, got {n}")
    if n == 0:
        return os.cpu_count() or 1
    return n


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Like map(), but may fan out over threads; results keep input order."""
    seq: Sequence[T] = list(items)
    workers = worker_count()
    if workers <= 1 or len(seq) <= 1:
        return [fn(item) for item in seq]
    with ThreadPoolExecutor(max_workers=min(workers, len(seq))) as pool:
        return list(pool.map(fn, seq))
