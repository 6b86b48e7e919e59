import os
from concurrent.futures import ThreadPoolExecutor


def max_threads() -> int:
    """Worker cap from ``REINJECTR_THREADS`` (default 1, i.e. sequential)."""
    raw = os.environ.get("REINJECTR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Order-preserving map; results never depend on the worker count."""
    items = list(items)
    workers = min(max_threads(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
