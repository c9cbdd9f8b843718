from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from survtmle.data import Dataset, ValidationError
from survtmle.formula import Formula, FormulaError
from survtmle.nuisance import (CoxModel, FixedPropensity, NoCensoring, SeparationError,
                               fit_arm_kaplan_meier, fit_cox, fit_kaplan_meier,
                               fit_logistic_propensity, predict_conditional_survival)
from survtmle.simulation import Scenario, simulate_dataset


def _ds(time, event, trt=None, cov=None, tau=None):
    n = len(time)
    trt = np.zeros(n, int) if trt is None else trt
    cov = np.zeros((n, 0)) if cov is None else cov
    return Dataset(time, event, trt, cov, tau or float(max(time)))


# ------------------------------------------------------------------- formula

def test_formula_parse_and_names():
    f = Formula.parse("A + L1 + L1^2 + L3:A")
    assert f.names == ["A", "L1", "L1^2", "L3:A"]
    X = f.design(np.array([1, 0]), np.array([[2.0, 0, 3.0], [1.0, 0, 5.0]]))
    np.testing.assert_allclose(X, [[1, 2, 4, 3], [0, 1, 1, 0]])
    assert str(Formula.parse("")) == "0"


@pytest.mark.parametrize("bad", ["A +", "L1^0", "A:*", "exp(L1)"])
def test_formula_rejects_bad_syntax(bad):
    with pytest.raises(FormulaError):
        Formula.parse(bad)


def test_formula_unknown_column():
    with pytest.raises(FormulaError):
        Formula.parse("L7").design(0, np.zeros((2, 2)))


# --------------------------------------------------------------- Kaplan-Meier

def test_km_hand_example():
    km = fit_kaplan_meier(_ds([1.0, 2.0, 3.0], [1, 0, 1]))
    np.testing.assert_allclose(km([1.0, 2.0, 3.0]), [2 / 3, 2 / 3, 0.0])
    assert km(0.5) == 1.0 and km.left(1.0) == 1.0


def test_km_greenwood_hand_value():
    km = fit_kaplan_meier(_ds([1.0, 2.0, 3.0, 4.0], [1, 0, 1, 0]))
    # S(3) = 3/4 * 1/2; Greenwood sum = 1/(4*3) + 1/(2*1)
    assert float(km(3.0)) == pytest.approx(0.375)
    assert float(km.greenwood(3.0)) == pytest.approx(0.375**2 * (1 / 12 + 1 / 2))


def test_km_single_record():
    km = fit_kaplan_meier(_ds([1.0], [1]))
    assert km(0.999) == 1.0 and km(1.0) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=40, unique=True))
def test_km_without_censoring_is_empirical_survivor(times):
    t = np.array(times)
    km = fit_kaplan_meier(_ds(t, np.ones(t.size, int)))
    grid = np.linspace(0, 11, 37)
    np.testing.assert_allclose(km(grid), [(t > g).mean() for g in grid], atol=1e-12)


def test_km_empty_arm():
    with pytest.raises(ValidationError):
        fit_kaplan_meier(_ds([1.0, 2.0], [1, 1]), arm=1)


def test_arm_km_and_no_censoring_shapes():
    ds = _ds([1.0, 2.0, 3.0, 4.0], [0, 1, 0, 1], trt=np.array([0, 0, 1, 1]))
    S = fit_arm_kaplan_meier(ds).survival_left([1.0, 1.5, 3.5], np.array([0, 0, 1, 1]),
                                                np.zeros((4, 0)))
    np.testing.assert_allclose(S[0], [1.0, 0.5, 0.5])
    np.testing.assert_allclose(S[2], [1.0, 1.0, 0.5])
    assert NoCensoring().survival_left([1, 2], 0, np.zeros((3, 1))).shape == (3, 2)


# ------------------------------------------------------------------------ Cox

def _partial_loglik(beta, X, time, hit):
    """Breslow partial log-likelihood written out directly (tie-aware)."""
    eta = X @ beta
    out = 0.0
    for t in np.unique(time[hit]):
        d = hit & (time == t)
        out += eta[d].sum() - d.sum() * math.log(np.exp(eta[time >= t]).sum())
    return out


def test_cox_matches_direct_partial_likelihood_maximiser():
    rng = np.random.default_rng(3)
    n = 80
    L = rng.normal(size=(n, 2))
    A = rng.integers(0, 2, n)
    T = np.round(rng.exponential(np.exp(-(0.5 * A - 0.7 * L[:, 0]))), 1) + 0.1
    ev = rng.integers(0, 2, n) | (T < 0.5)
    ds = Dataset(T, ev, A, L, tau=float(T.max()))
    m = fit_cox(ds, "A + L1 + L2")
    X = np.column_stack([A, L])
    ref = minimize(lambda b: -_partial_loglik(b, X, T, ev == 1), np.zeros(3), method="BFGS",
                   options={"gtol": 1e-10})
    np.testing.assert_allclose(m.coefficients, ref.x, atol=1e-5)


def test_cox_empty_formula_is_nelson_aalen():
    ds = _ds([1.0, 2.0, 2.0, 3.0, 4.0], [1, 1, 0, 1, 0])
    m = fit_cox(ds, "")
    np.testing.assert_allclose(m.baseline([1.0, 2.0, 3.0]), [1 / 5, 1 / 5 + 1 / 4, 1 / 5 + 1 / 4 + 1 / 2])


def test_cox_null_effect_near_zero():
    sc = Scenario(n=5000, seed=5, effect_early=0.0, effect_late=0.0, l1_squared=0.0)
    m = fit_cox(simulate_dataset(sc), "A + L1 + L2")
    assert np.all(np.abs(m.coefficients) < 0.05)


def test_cox_recovers_censoring_coefficients():
    # the L1:A coefficient has a standard error near 0.1 at n = 5000, so the
    # +-0.1 band is checked on the average of four independent samples
    coefs = [fit_cox(simulate_dataset(Scenario(n=5000, seed=s)), "L3 + L1:A",
                     target="censoring").coefficients for s in (11, 12, 13, 14)]
    np.testing.assert_allclose(np.mean(coefs, axis=0), [-0.8, 1.2], atol=0.1)


def test_cox_separation_detected():
    # every event happens in arm 1: the partial likelihood increases without bound in beta
    ds = Dataset([1.0, 2.0, 3.0, 4.0], [1, 1, 0, 0], [1, 1, 0, 0], np.zeros((4, 0)), tau=4.0)
    with pytest.raises(SeparationError):
        fit_cox(ds, "A")


def test_predict_conditional_survival_examples():
    m = CoxModel(Formula.parse("L1"), np.array([math.log(2)]), np.array([1.0]), np.array([0.5]))
    assert predict_conditional_survival(m, 2.0, 0, [[1.0]])[0] == pytest.approx(math.exp(-1))
    assert predict_conditional_survival(m, 0.0, 0, [[1.0]])[0] == 1.0
    assert predict_conditional_survival(m, 2.0, 0, [[0.0]])[0] == pytest.approx(math.exp(-0.5))


def test_cox_serialisation_roundtrip():
    m = fit_cox(simulate_dataset(Scenario(n=300, seed=2)), "A + L1")
    back = CoxModel.from_dict(m.to_dict())
    L = np.random.default_rng(0).uniform(-1, 1, (5, 3))
    np.testing.assert_allclose(back.survival([0.3, 1.0], 1, L), m.survival([0.3, 1.0], 1, L))


# ----------------------------------------------------------------- propensity

def test_logistic_intercept_only():
    rng = np.random.default_rng(7)
    n = 10_000
    ds = Dataset(np.ones(n), np.ones(n, int), rng.integers(0, 2, n), rng.normal(size=(n, 1)), 1.0)
    p = fit_logistic_propensity(ds, "1").predict(1, ds.covariates)
    assert abs(p[0] - 0.5) < 0.02 and np.ptp(p) == 0


def test_logistic_slope_recovered():
    rng = np.random.default_rng(8)
    n = 10_000
    L = rng.normal(size=(n, 1))
    A = (rng.uniform(size=n) < 1 / (1 + np.exp(-L[:, 0]))).astype(int)
    m = fit_logistic_propensity(Dataset(np.ones(n), np.ones(n, int), A, L, 1.0), "L1")
    assert m.coefficients[1] == pytest.approx(1.0, abs=0.1)


def test_logistic_errors_and_truncation():
    n = 20
    with pytest.raises(ValidationError):
        fit_logistic_propensity(Dataset(np.ones(n), np.ones(n, int), np.ones(n, int),
                                        np.zeros((n, 1)), 1.0))
    L = np.linspace(-1, 1, n)[:, None]
    with pytest.raises(SeparationError):
        fit_logistic_propensity(Dataset(np.ones(n), np.ones(n, int), (L[:, 0] > 0).astype(int),
                                        L, 1.0), "L1")
    assert FixedPropensity(0.3).predict(np.array([1, 0]), np.zeros((2, 1))).tolist() == [0.3, 0.7]
