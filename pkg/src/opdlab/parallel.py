from concurrent.futures import ThreadPoolExecutor


def ordered_map(fn, items, threads: int = 1) -> list:
    """``map`` whose result order (and hence any later reduction) ignores ``threads``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def ordered_sum(vectors):
    """Left-to-right sum; fixed association keeps results bit-stable."""
    it = iter(vectors)
    total = next(it).copy()
    for v in it:
        total += v
    return total
