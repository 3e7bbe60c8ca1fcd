"""Order-preserving map over a thread pool.

Results are collected in input order and no reduction crosses task
boundaries, so the thread count never changes an output bit.
"""

from concurrent.futures import ThreadPoolExecutor

_threads = 1


def set_threads(n):
    global _threads
    _threads = max(1, int(n))


def get_threads():
    return _threads


def pmap(fn, items):
    items = list(items)
    if _threads <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=_threads) as pool:
        return list(pool.map(fn, items))
