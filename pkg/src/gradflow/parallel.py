"""Deterministic chunked map over the rows of a batch.

Rows are always split into the same fixed-size chunks, whatever the number
of worker threads, so results are identical for any ``threads`` setting.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK_SIZE = 256


def chunk_bounds(n, chunk_size=CHUNK_SIZE):
    return [(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]


def map_chunks(fn, X, threads=1, chunk_size=CHUNK_SIZE):
    """Apply ``fn(X[a:b], a)`` to every fixed chunk; return results in order."""
    bounds = chunk_bounds(len(X), chunk_size)
    if threads <= 1 or len(bounds) <= 1:
        return [fn(X[a:b], a) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ab: fn(X[ab[0]:ab[1]], ab[0]), bounds))


def concat_rows(parts, width):
    if not parts:
        return np.zeros((0, width))
    return np.concatenate(parts, axis=0)
