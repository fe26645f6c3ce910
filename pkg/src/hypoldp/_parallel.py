"""Worker-count policy and an order-preserving thread map."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count(requested: int | None = None) -> int:
    """Explicit request, else HYPOLDP_THREADS, else the CPU count."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("HYPOLDP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"HYPOLDP_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def ordered_map(fn, items, workers: int | None = None) -> list:
    """``[fn(x) for x in items]``, possibly on threads; result order follows ``items``."""
    items = list(items)
    n = worker_count(workers)
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
