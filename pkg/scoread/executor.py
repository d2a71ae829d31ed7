"""
Window executor for scoread.

Fans independent per-window jobs out over a bounded thread pool and reassembles
results in submission order.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

import psutil


logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def default_workers() -> int:
    """Physical core count, falling back to logical cores, then 1."""
    return psutil.cpu_count(logical=False) or psutil.cpu_count(logical=True) or 1


class WindowExecutor:
    """Runs per-window jobs against an immutable model."""

    def __init__(self, workers: Optional[int] = None, progress_every: int = 100):
        """
        Initialize executor.

        Args:
            workers: Maximum concurrent jobs (None = physical core count)
            progress_every: Log progress after this many completed jobs
        """
        if workers is not None and workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.workers = workers or default_workers()
        self.progress_every = progress_every
        self._done = 0
        self._lock = threading.Lock()

    def _tick(self, total: int, label: str):
        with self._lock:
            self._done += 1
            done = self._done
        if done % self.progress_every == 0 or done == total:
            logger.info(f"{label}: {done}/{total} windows")

    def map_ordered(
        self, fn: Callable[[T], R], items: Sequence[T], label: str = "scoring"
    ) -> List[R]:
        """
        Apply fn to every item and return results in input order.

        The first exception raised by any job propagates; results of the other
        jobs are discarded.
        """
        total = len(items)
        self._done = 0

        def run(item: T) -> R:
            result = fn(item)
            self._tick(total, label)
            return result

        if self.workers == 1 or total <= 1:
            return [run(item) for item in items]

        logger.debug(f"{label}: {total} jobs on {self.workers} workers")
        with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix=label) as pool:
            futures = [pool.submit(run, item) for item in items]
            try:
                return [future.result() for future in futures]
            except Exception:
                for future in futures:
                    future.cancel()
                raise
