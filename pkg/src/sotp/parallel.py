"""Order-preserving process-pool map for independent corpus instances."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor


def parallel_map(fn, items, parallel=1):
    items = list(items)
    if parallel and parallel > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=int(parallel)) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]
