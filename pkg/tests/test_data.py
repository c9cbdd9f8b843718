from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from survtmle.data import (CountingView, Dataset, ObservedRecord, ParseError, TimeGrid,
                           ValidationError, counting_process, event_sequence, event_time_grid,
                           load_csv, risk_set_size, uniform_grid, write_csv)


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_three_rows(tmp_path):
    p = _write(tmp_path, "time,event,trt,L1\n1,1,1,0.1\n2,0,0,-0.2\n3,1,1,0.5\n")
    ds = load_csv(p, tau=3.0)
    assert (ds.n, ds.d, ds.J) == (3, 1, 1)
    assert ds.record(1) == ObservedRecord((-0.2,), 0, 2.0, 0)
    np.testing.assert_array_equal(ds.covariates[:, 0], [0.1, -0.2, 0.5])


def test_load_negative_time_names_row(tmp_path):
    p = _write(tmp_path, "time,event,trt,L1\n1,1,1,0\n-1,0,0,0\n")
    with pytest.raises(ValidationError) as exc:
        load_csv(p)
    assert exc.value.rows == [1]


def test_event_code_outside_range(tmp_path):
    p = _write(tmp_path, "time,event,trt,L1\n1,3,1,0\n2,1,0,0\n")
    with pytest.raises(ValidationError):
        load_csv(p, J=2)


def test_missing_file_and_empty_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "nope.csv")
    with pytest.raises(ParseError):
        load_csv(_write(tmp_path, ""))


def test_schema_remaps_columns(tmp_path):
    p = _write(tmp_path, "T,status,arm,age\n1.5,1,0,40\n2.5,0,1,50\n")
    ds = load_csv(p, {"time": "T", "event": "status", "trt": "arm", "covariates": ["age"]}, tau=2)
    assert ds.covariate_names == ("age",)
    assert ds.tau == 2.0 and ds.n == 2


def test_roundtrip_csv(tmp_path):
    rng = np.random.default_rng(1)
    ds = Dataset(rng.exponential(size=8), rng.integers(0, 2, 8), rng.integers(0, 2, 8),
                 rng.normal(size=(8, 2)), tau=1.0)
    write_csv(ds, tmp_path / "x.csv")
    back = load_csv(tmp_path / "x.csv", tau=1.0)
    np.testing.assert_array_equal(back.time, ds.time)
    np.testing.assert_array_equal(back.covariates, ds.covariates)


def test_from_records_and_immutability():
    recs = [ObservedRecord((0.0,), 1, 1.0, 1), ObservedRecord((1.0,), 0, 2.0, 0)]
    ds = Dataset.from_records(recs, tau=2.0)
    assert ds.records == recs
    with pytest.raises(ValueError):
        ds.time[0] = 5.0


def test_risk_set_size_examples():
    ds = Dataset([1.0, 2.0, 3.0], [1, 0, 1], [0, 0, 0], np.zeros((3, 0)), tau=3.0)
    assert risk_set_size(ds, 2.0) == 2
    assert risk_set_size(ds, 0.0) == 3
    assert risk_set_size(ds, np.nextafter(3.0, 4.0)) == 0


def test_event_sequence_and_counting_process():
    ds = Dataset([2.0, 1.0, 3.0], [1, 2, 0], [0, 1, 0], np.zeros((3, 0)), tau=3.0, J=2)
    assert event_sequence(ds) == [(1.0, 1, 2), (2.0, 0, 1), (3.0, 2, 0)]
    N = counting_process(ds, [0.5, 1.0, 2.5])
    assert N.shape == (3, 3, 3)
    np.testing.assert_array_equal(N[2, 1], [0, 1, 1])   # cause 2 jumps at t = 1
    np.testing.assert_array_equal(N[1, 0], [0, 0, 1])
    assert N[0].sum() == 0                               # censoring at 3 is beyond 2.5


def test_uniform_grid_points():
    g = uniform_grid(1.2, 10)
    np.testing.assert_allclose(g.points, np.arange(11) * 0.12, atol=1e-15)
    assert uniform_grid(1.2, 1).to_list() == [0.0, 1.2]


def test_quantile_grid_fallback_flagged():
    ds = Dataset([0.5, 0.5, 0.5, 2.0], [1, 1, 1, 0], [0, 1, 0, 1], np.zeros((4, 0)), tau=1.0)
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        g = event_time_grid(ds, 3)
    assert g.fallback and g.n_intervals == 3
    assert not event_time_grid(ds, 1).fallback


def test_grid_interval_conventions():
    g = TimeGrid([0.0, 1.0, 2.0])
    # events belong to (t_k, t_{k+1}]
    np.testing.assert_array_equal(g.event_interval([0.5, 1.0, 1.5, 2.0, 2.5]), [0, 0, 1, 1, -1])
    np.testing.assert_array_equal(g.locate([0.0, 1.0, 1.99]), [0, 1, 1])
    np.testing.assert_allclose(g.exposure([1.5, 0.5]), [[1.0, 0.5], [0.5, 0.0]])


def test_counting_view_hand_example():
    # subject 1 has an event at 1.5, subject 2 is censored at 0.5
    ds = Dataset([1.5, 0.5], [1, 0], [0, 0], np.zeros((2, 0)), tau=2.0)
    v = CountingView.build(ds, TimeGrid([0.0, 1.0, 2.0]))
    np.testing.assert_array_equal(v.dN[0], [[0, 1], [0, 0]])
    np.testing.assert_allclose(v.exposure, [[1.0, 0.5], [0.5, 0.0]])
    np.testing.assert_array_equal(v.at_risk_end, [[1, 0], [0, 0]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 5.0), min_size=1, max_size=30), st.integers(1, 12))
def test_exposure_sums_to_follow_up(times, K):
    g = uniform_grid(3.0, K)
    t = np.array(times)
    np.testing.assert_allclose(g.exposure(t).sum(axis=1), np.minimum(t, 3.0), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0, exclude_min=True), min_size=1, max_size=20), st.integers(1, 40))
def test_refined_grid_contains_original(points, m):
    base = TimeGrid(np.unique(np.concatenate([[0.0], points, [1.0]])))
    fine = base.refine(m)
    assert set(np.round(base.points, 9)) <= set(np.round(fine.points, 9))
    assert fine.tau == base.tau
