# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.

from __future__ import annotations

import logging

import pytest
from qlonn.workers import TrialPool, chunked


def test_chunked():
    assert chunked(7, 3) == [slice(0, 3), slice(3, 6), slice(6, 7)]
    assert chunked(0, 3) == []


@pytest.mark.parametrize("threads", [1, 2, 5])
def test_map_keeps_the_submission_order(threads):
    with TrialPool(threads) as pool:
        assert pool.map(lambda unit: unit * unit, range(20)) == [unit * unit for unit in range(20)]


def test_failures_are_logged_and_raised(caplog):
    def _fail(unit):
        raise RuntimeError(f"unit {unit}")

    with TrialPool(2) as pool, pytest.raises(RuntimeError):
        with caplog.at_level(logging.ERROR):
            pool.map(_fail, range(3))

    assert "Monte Carlo unit failed" in caplog.text


def test_handled_failures_return_no_results():
    def _fail(unit):
        raise RuntimeError

    with TrialPool(2, exception_handler=lambda exception, log: True) as pool:
        assert pool.map(_fail, range(3)) == []


def test_thread_count_is_checked():
    with pytest.raises(ValueError):
        TrialPool(0)
