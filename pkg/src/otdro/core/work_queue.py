from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Callable, Hashable, Mapping, Optional, TypeVar

import numpy as np
import psutil

logger = logging.getLogger(__name__)

K = TypeVar("K", bound=Hashable)
R = TypeVar("R")


def default_workers() -> int:
    return psutil.cpu_count(logical=False) or 1


def job_rng(seed: int, job_index: int) -> np.random.Generator:
    """Generator for one job; depends only on the seed and the job's position in key order."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(job_index,)))


def run_keyed_jobs(
    jobs: Mapping[K, Callable[[], R]], workers: Optional[int] = None
) -> list[tuple[K, R]]:
    """Run independent jobs on a thread pool and return ``(key, result)`` sorted by key.

    The first job to raise cancels the rest and its exception propagates.
    """
    workers = workers or default_workers()
    ordered = sorted(jobs)
    results: dict[K, R] = {}
    if workers == 1 or len(ordered) <= 1:
        for key in ordered:
            results[key] = jobs[key]()
    else:
        with ThreadPoolExecutor(max_workers=min(workers, len(ordered))) as pool:
            futures = {pool.submit(jobs[key]): key for key in ordered}
            try:
                for future in as_completed(futures):
                    results[futures[future]] = future.result()
            except BaseException:
                for future in futures:
                    future.cancel()
                raise
    logger.debug("ran %d job(s) on %d worker(s)", len(ordered), workers)
    return [(key, results[key]) for key in ordered]
