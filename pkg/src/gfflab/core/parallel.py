"""
Replicate fan-out over a process pool.

Replicates are split into contiguous chunks; results are returned in
replicate order whatever the worker count, so reductions downstream run in
a fixed order.
"""

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from typing import Any, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")


def _run_chunk(func: Callable[..., T], indices: Sequence[int], args: tuple) -> list[T]:
    return [func(i, *args) for i in indices]


def map_replicates(
    func: Callable[..., T],
    count: int,
    *args: Any,
    workers: int = 1,
    chunks_per_worker: int = 4,
) -> list[T]:
    """
    Evaluate ``func(i, *args)`` for i in range(count), in order.

    Args:
        func: Picklable top-level function of the replicate index
        count: Number of replicates
        *args: Extra positional arguments passed to every call
        workers: Process count; 1 runs inline
        chunks_per_worker: Chunks submitted per worker

    Returns:
        List of results indexed by replicate
    """
    if count <= 0:
        return []
    if workers <= 1 or count == 1:
        return [func(i, *args) for i in range(count)]

    n_chunks = min(count, workers * chunks_per_worker)
    bounds = [round(k * count / n_chunks) for k in range(n_chunks + 1)]
    chunks = [range(bounds[k], bounds[k + 1]) for k in range(n_chunks)]
    logger.debug("Fanning out %d replicates in %d chunks over %d workers", count, n_chunks, workers)

    results: list[T] = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_chunk, func, list(chunk), args) for chunk in chunks]
        for future in futures:
            results.extend(future.result())
    return results
