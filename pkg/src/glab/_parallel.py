"""Deterministic worker-pool helper.

Workers are threads: the heavy lifting is numpy, which releases the GIL.
Results are merged in task order, so the output never depends on the worker
count.  ``GLAB_THREADS`` caps the pool size (1 disables threading).
"""

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count(n_tasks):
    cap = os.environ.get("GLAB_THREADS")
    if cap is not None:
        try:
            cap = int(cap)
        except ValueError:
            cap = 1
        cap = max(1, cap)
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


def parallel_map(fn, items):
    """Map ``fn`` over ``items`` preserving order."""
    items = list(items)
    n = worker_count(len(items))
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
