"""Order-preserving worker pool for embarrassingly parallel point solves."""

from concurrent.futures import ThreadPoolExecutor


def parallel_map(fn, items, workers: int = 1):
    """Map fn over items, optionally on a thread pool, preserving order.

    Each task writes only its own result slot and all randomness is keyed by
    task identity, so results do not depend on the worker count.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
