"""Tests for the ordered window executor."""

import threading
import time

import pytest

from scoread.executor import WindowExecutor, default_workers


def test_default_workers():
    assert default_workers() >= 1
    assert WindowExecutor().workers == default_workers()


def test_rejects_bad_worker_count():
    with pytest.raises(ValueError):
        WindowExecutor(workers=0)


@pytest.mark.parametrize("workers", [1, 4])
def test_results_in_submission_order(workers):
    def job(i):
        # Later items finish first.
        time.sleep(0.001 * (20 - i))
        return i * i

    assert WindowExecutor(workers=workers).map_ordered(job, list(range(20))) == [i * i for i in range(20)]


def test_runs_concurrently():
    seen = set()
    lock = threading.Lock()

    def job(i):
        with lock:
            seen.add(threading.current_thread().name)
        time.sleep(0.01)
        return i

    WindowExecutor(workers=4).map_ordered(job, list(range(16)), label="probe")
    assert len(seen) > 1


def test_first_exception_propagates():
    def job(i):
        if i == 3:
            raise RuntimeError("window 3 failed")
        return i

    with pytest.raises(RuntimeError, match="window 3"):
        WindowExecutor(workers=2).map_ordered(job, list(range(8)))


def test_empty_input():
    assert WindowExecutor(workers=2).map_ordered(lambda x: x, []) == []
