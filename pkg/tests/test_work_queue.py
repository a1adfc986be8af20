import time

import numpy as np
import pytest

from otdro.core.work_queue import default_workers, job_rng, run_keyed_jobs


def test_results_come_back_in_key_order():
    def job(value, pause):
        def run():
            time.sleep(pause)
            return value * 10

        return run

    jobs = {(2, "b"): job(2, 0.0), (1, "a"): job(1, 0.05), (3, "c"): job(3, 0.01)}
    results = run_keyed_jobs(jobs, workers=3)
    assert results == [((1, "a"), 10), ((2, "b"), 20), ((3, "c"), 30)]
    assert run_keyed_jobs(jobs, workers=1) == results


def test_first_failure_propagates():
    def boom():
        raise RuntimeError("cell failed")

    with pytest.raises(RuntimeError, match="cell failed"):
        run_keyed_jobs({1: lambda: 1, 2: boom, 3: lambda: 3}, workers=2)


def test_job_streams_depend_only_on_seed_and_index():
    assert np.array_equal(job_rng(7, 3).random(4), job_rng(7, 3).random(4))
    assert not np.array_equal(job_rng(7, 3).random(4), job_rng(7, 4).random(4))
    assert not np.array_equal(job_rng(7, 3).random(4), job_rng(8, 3).random(4))


def test_default_workers_is_positive():
    assert default_workers() >= 1
