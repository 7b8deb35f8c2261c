"""Ordered thread fan-out capped by the LIPCERT_THREADS environment variable."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count(default=1) -> int:
    raw = os.environ.get("LIPCERT_THREADS", "")
    try:
        n = int(raw) if raw else default
    except ValueError:
        n = default
    return max(1, n)


def map_ordered(fn, items, workers=None):
    """``list(map(fn, items))``, optionally on threads; results keep input order."""
    items = list(items)
    workers = worker_count() if workers is None else max(1, workers)
    if workers == 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
