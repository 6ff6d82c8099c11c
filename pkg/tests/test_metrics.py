import csv
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from epiout import metrics


def test_weighted_mse_examples():
    y = np.zeros(2)
    assert metrics.weighted_mse([1.0, 3.0], y, [0.0, 0.0]) == 5.0
    assert metrics.weighted_mse([1.0, 3.0], y, [0.0, 1.0]) == 1.0
    with pytest.raises(metrics.UndefinedMetricError):
        metrics.weighted_mse([1.0, 3.0], y, [1.0, 1.0])


def test_weighted_mse_input_checks():
    with pytest.raises(ValueError):
        metrics.weighted_mse([1.0], [1.0, 2.0], [0.0])
    with pytest.raises(ValueError):
        metrics.weighted_mse([1.0], [1.0], [1.5])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))))
def test_zero_etas_reduce_to_mse(pair):
    pred, y = pair
    assert metrics.weighted_mse(pred, y, np.zeros(len(y))) == metrics.mse(pred, y)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=st.floats(0, 0.99)))),
    st.floats(0.01, 100))
def test_weighted_mse_scales_with_squared_errors(pair, c):
    err, eta = pair
    base = metrics.weighted_mse(err, np.zeros(len(err)), eta)
    scaled = metrics.weighted_mse(np.sqrt(c) * err, np.zeros(len(err)), eta)
    assert scaled == pytest.approx(c * base, rel=1e-9, abs=1e-300)


def test_total_discount():
    assert metrics.total_discount([0.2, 0.3]) == pytest.approx(0.5)
    assert metrics.total_discount(np.zeros(4)) == 0.0
    assert metrics.total_discount(np.ones(7)) == 7.0
    with pytest.raises(ValueError):
        metrics.total_discount([-0.1])


def test_timed_noop_is_fast():
    out, dt = metrics.timed(lambda: 42)
    assert out == 42 and 0 <= dt < 1e-3


def test_timing_is_additive():
    def work():
        t_end = time.perf_counter() + 0.02
        while time.perf_counter() < t_end:
            pass
    _, a = metrics.best_of(work)
    _, b = metrics.best_of(work)
    _, ab = metrics.best_of(lambda: (work(), work()))
    assert ab == pytest.approx(a + b, rel=0.1)


def test_best_of_runs_repeats():
    calls = []
    out, dt = metrics.best_of(lambda: calls.append(1) or len(calls), repeats=4)
    assert out == 4 and len(calls) == 4 and dt >= 0


def test_summary_fields_are_deterministic_columns():
    assert "train_seconds" not in metrics.SUMMARY_FIELDS
    assert metrics.SUMMARY_FIELDS[:3] == ["model", "dataset", "seed"]


def test_write_records_and_predictions(tmp_path):
    rec = metrics.EvalRecord("epiout", "1d_center", 0, 0.1, 0.2, 3.0, 0.5, 1.0, 0.01)
    metrics.write_records([rec], tmp_path / "s.csv", metrics.SUMMARY_FIELDS)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == metrics.SUMMARY_FIELDS
    assert rows[1][:4] == ["epiout", "1d_center", "0", "0.1"]
    metrics.write_predictions(tmp_path / "p.csv", np.array([0.0, 1.0]), [0.5, 0.6], [0.1, 0.2])
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows == [["x1", "prediction", "eta"], ["0.0", "0.5", "0.1"], ["1.0", "0.6", "0.2"]]
