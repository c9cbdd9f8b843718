"""Initial estimators for treatment, censoring and event-time nuisances.

Kaplan-Meier (with Greenwood variance), Cox proportional hazards with Breslow
ties and baseline, and a Newton-Raphson logistic propensity model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import Dataset, ValidationError
from .formula import Formula

__all__ = [
    "ArmKaplanMeier",
    "ConvergenceError",
    "CoxModel",
    "FixedPropensity",
    "NoCensoring",
    "PropensityModel",
    "SeparationError",
    "StepSurvival",
    "fit_arm_kaplan_meier",
    "fit_cox",
    "fit_kaplan_meier",
    "fit_logistic_propensity",
    "predict_conditional_survival",
]


class ConvergenceError(RuntimeError):
    code = "fit.no_convergence"

    def __init__(self, message: str, gradient_norm: float = float("nan")):
        super().__init__(message)
        self.gradient_norm = gradient_norm


class SeparationError(RuntimeError):
    code = "fit.separation"


def _target_indicator(ds: Dataset, target: str, cause: int) -> np.ndarray:
    if target == "event":
        return ds.event == cause
    if target == "any":
        return ds.event >= 1
    if target == "censoring":
        return ds.event == 0
    raise ValueError(f"unknown target process {target!r}")


# --------------------------------------------------------------- Kaplan-Meier

@dataclass(frozen=True, eq=False)
class StepSurvival:
    """Right-continuous survival step function starting at 1."""

    jump_times: np.ndarray
    values: np.ndarray
    variance: np.ndarray | None = None

    def __call__(self, t) -> np.ndarray:
        k = np.searchsorted(self.jump_times, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[1.0], self.values])[k]

    def left(self, t) -> np.ndarray:
        """Left limit ``S(t-)``."""
        k = np.searchsorted(self.jump_times, np.asarray(t, dtype=float), side="left")
        return np.concatenate([[1.0], self.values])[k]

    def greenwood(self, t) -> np.ndarray:
        if self.variance is None:
            raise ValueError("no variance stored")
        k = np.searchsorted(self.jump_times, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[0.0], self.variance])[k]


def _product_limit(time: np.ndarray, hit: np.ndarray) -> StepSurvival:
    ut, inv = np.unique(time, return_inverse=True)
    deaths = np.bincount(inv, weights=hit.astype(float), minlength=ut.size)
    leaving = np.bincount(inv, minlength=ut.size).astype(float)
    at_risk = np.cumsum(leaving[::-1])[::-1]
    keep = deaths > 0
    t, d, y = ut[keep], deaths[keep], at_risk[keep]
    surv = np.cumprod(1.0 - d / y)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(y > d, d / (y * (y - d)), np.inf)
        var = np.where(surv > 0, surv**2 * np.cumsum(terms), 0.0)
    return StepSurvival(t, surv, var)


def fit_kaplan_meier(ds: Dataset, arm: int | None = None, target: str = "any",
                     cause: int = 1) -> StepSurvival:
    """Product-limit estimator, optionally restricted to one treatment arm.

    ``target="any"`` treats every event type as the event; ``"censoring"``
    estimates the censoring survivor function.
    """
    rows = np.ones(ds.n, bool) if arm is None else ds.treatment == arm
    if not rows.any():
        raise ValidationError(f"arm {arm} has no records")
    hit = _target_indicator(ds, target, cause)[rows]
    if target != "censoring" and not hit.any():
        raise ValidationError(f"arm {arm} has no events")
    return _product_limit(ds.time[rows], hit)


@dataclass(frozen=True, eq=False)
class ArmKaplanMeier:
    """Censoring survivor function estimated by Kaplan-Meier within each arm."""

    curves: tuple[StepSurvival, StepSurvival]
    name: str = "km"

    def survival_left(self, t, a, covariates) -> np.ndarray:
        n = np.asarray(covariates).shape[0]
        t = np.atleast_1d(np.asarray(t, dtype=float))
        a = np.broadcast_to(np.asarray(a), (n,))
        out = np.empty((n, t.size))
        for arm in (0, 1):
            out[a == arm] = self.curves[arm].left(t)[None, :]
        return out


def fit_arm_kaplan_meier(ds: Dataset, target: str = "censoring") -> ArmKaplanMeier:
    curves = []
    for arm in (0, 1):
        rows = ds.treatment == arm
        if not rows.any():
            raise ValidationError(f"arm {arm} has no records")
        curves.append(_product_limit(ds.time[rows], _target_indicator(ds, target, 1)[rows]))
    return ArmKaplanMeier(tuple(curves))


@dataclass(frozen=True)
class NoCensoring:
    """``S^c = 1``: the data are known to be uncensored."""

    name: str = "none"

    def survival_left(self, t, a, covariates) -> np.ndarray:
        n = np.asarray(covariates).shape[0]
        return np.ones((n, np.atleast_1d(t).size))


# ------------------------------------------------------------------------ Cox

@dataclass(frozen=True, eq=False)
class CoxModel:
    """Fitted Cox model with Breslow baseline cumulative hazard."""

    formula: Formula
    coefficients: np.ndarray
    baseline_times: np.ndarray
    baseline_cumhaz: np.ndarray
    target: str = "event"
    cause: int = 1
    covariate_names: tuple[str, ...] = ()
    iterations: int = 0
    score_norm: float = 0.0
    name: str = field(default="cox")

    @property
    def coefficient_names(self) -> list[str]:
        return self.formula.names

    def linear_predictor(self, a, covariates) -> np.ndarray:
        X = self.formula.design(a, covariates, self.covariate_names, with_intercept=False)
        return X @ self.coefficients

    def baseline(self, t, left: bool = False) -> np.ndarray:
        side = "left" if left else "right"
        k = np.searchsorted(self.baseline_times, np.asarray(t, dtype=float), side=side)
        return np.concatenate([[0.0], self.baseline_cumhaz])[k]

    def cumulative_hazard(self, t, a, covariates, left: bool = False) -> np.ndarray:
        """``Lambda(t | a, l)`` as an array of shape (n, len(t))."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        risk = np.exp(self.linear_predictor(a, covariates))
        return risk[:, None] * self.baseline(t, left)[None, :]

    def survival(self, t, a, covariates, left: bool = False) -> np.ndarray:
        return np.exp(-self.cumulative_hazard(t, a, covariates, left))

    def survival_left(self, t, a, covariates) -> np.ndarray:
        return self.survival(t, a, covariates, left=True)

    def to_dict(self) -> dict:
        return {
            "formula": str(self.formula),
            "target": self.target,
            "cause": self.cause,
            "covariate_names": list(self.covariate_names),
            "coefficients": dict(zip(self.formula.names, map(float, self.coefficients))),
            "baseline": {"time": self.baseline_times.tolist(),
                         "cumhaz": self.baseline_cumhaz.tolist()},
            "iterations": self.iterations,
            "score_norm": self.score_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoxModel":
        f = Formula.parse(d["formula"] if d["formula"] != "0" else "")
        coef = np.array([d["coefficients"][nm] for nm in f.names], dtype=float)
        return cls(f, coef, np.asarray(d["baseline"]["time"], float),
                   np.asarray(d["baseline"]["cumhaz"], float), d["target"], d["cause"],
                   tuple(d["covariate_names"]), d.get("iterations", 0), d.get("score_norm", 0.0))


def predict_conditional_survival(m: CoxModel, t: float, a: int, covariates,
                                 left: bool = False) -> np.ndarray:
    """``exp(-exp(b'x(a, l)) Lambda_0(t))`` for each covariate row."""
    cov = np.atleast_2d(np.asarray(covariates, dtype=float))
    return m.survival([t], a, cov, left=left)[:, 0]


class _RiskSets:
    """Breslow partial-likelihood pieces grouped by distinct observed time."""

    def __init__(self, time: np.ndarray, hit: np.ndarray):
        self.ut, self.inv = np.unique(time, return_inverse=True)
        self.deaths = np.bincount(self.inv, weights=hit.astype(float), minlength=self.ut.size)
        self.hit = hit

    def _revsum(self, w: np.ndarray) -> np.ndarray:
        # sum over subjects with time >= u, for each distinct u
        if w.ndim == 1:
            s = np.bincount(self.inv, weights=w, minlength=self.ut.size)
            return np.cumsum(s[::-1])[::-1]
        s = np.zeros((self.ut.size,) + w.shape[1:])
        np.add.at(s, self.inv, w)
        return np.cumsum(s[::-1], axis=0)[::-1]

    def evaluate(self, X: np.ndarray, beta: np.ndarray):
        eta = X @ beta
        c = eta.max() if eta.size else 0.0
        r = np.exp(eta - c)
        s0 = self._revsum(r)
        s1 = self._revsum(r[:, None] * X)
        d = self.deaths
        ev = d > 0
        loglik = float(eta[self.hit].sum() - np.sum(d[ev] * (np.log(s0[ev]) + c)))
        xbar = s1[ev] / s0[ev, None]
        score = X[self.hit].sum(axis=0) - (d[ev, None] * xbar).sum(axis=0)
        s2 = self._revsum(r[:, None, None] * X[:, :, None] * X[:, None, :])
        info = np.einsum("u,ujk->jk", d[ev], s2[ev] / s0[ev, None, None]) \
            - np.einsum("u,uj,uk->jk", d[ev], xbar, xbar)
        return loglik, score, info

    def breslow(self, X: np.ndarray, beta: np.ndarray):
        r = np.exp(X @ beta) if X.shape[1] else np.ones(X.shape[0])
        s0 = self._revsum(r)
        ev = self.deaths > 0
        return self.ut[ev], np.cumsum(self.deaths[ev] / s0[ev])


def fit_cox(ds: Dataset, formula: str | Formula = "", target: str = "event", cause: int = 1,
            max_iter: int = 25, tol: float = 1e-8, coef_cap: float = 20.0) -> CoxModel:
    """Cox regression by Newton-Raphson with step halving (Breslow ties).

    ``target`` selects the modelled process: ``"event"`` (cause ``cause``),
    ``"any"`` (all event types) or ``"censoring"``.
    """
    f = formula if isinstance(formula, Formula) else Formula.parse(formula)
    f = Formula(f.terms, intercept=False)
    f.check(ds.covariate_names)
    hit = _target_indicator(ds, target, cause)
    if not hit.any():
        raise ValidationError(f"no observed {target} times to fit a Cox model")
    X = f.design(ds.treatment, ds.covariates, ds.covariate_names, with_intercept=False)
    rs = _RiskSets(ds.time, hit)
    beta = np.zeros(X.shape[1])
    it, gnorm = 0, 0.0
    if X.shape[1]:
        loglik, score, info = rs.evaluate(X, beta)
        gnorm = float(np.linalg.norm(score))
        last = np.inf
        # converged once both the score and the Newton step are small: under
        # separation the score vanishes while the step stays of order one
        while gnorm >= tol or last >= 1e-6:
            if it >= max_iter:
                raise ConvergenceError(
                    f"Cox fit did not converge in {max_iter} iterations "
                    f"(score norm {gnorm:.3g})", gnorm)
            it += 1
            try:
                step = np.linalg.solve(info, score)
            except np.linalg.LinAlgError:
                raise SeparationError("singular information matrix in Cox fit") from None
            for _ in range(30):
                cand = beta + step
                new = rs.evaluate(X, cand)
                if np.isfinite(new[0]) and new[0] >= loglik - 1e-12 * abs(loglik):
                    break
                step = step / 2
            last = float(np.max(np.abs(cand - beta)))
            beta = cand
            loglik, score, info = new
            gnorm = float(np.linalg.norm(score))
            if np.max(np.abs(beta)) > coef_cap:
                raise SeparationError(
                    f"Cox coefficient exceeded {coef_cap} (possible separation): {beta}")
    times, cumhaz = rs.breslow(X, beta)
    return CoxModel(f, beta, times, cumhaz, target, cause, ds.covariate_names, it, gnorm)


# ----------------------------------------------------------------- propensity

@dataclass(frozen=True, eq=False)
class PropensityModel:
    """Logistic model for ``P(A = 1 | L)``; predictions truncated to ``[eta, 1 - eta]``."""

    formula: Formula
    coefficients: np.ndarray
    covariate_names: tuple[str, ...] = ()
    eta: float = 0.01
    name: str = "logistic"

    def predict(self, a, covariates) -> np.ndarray:
        cov = np.atleast_2d(np.asarray(covariates, dtype=float))
        X = self.formula.design(0.0, cov, self.covariate_names, with_intercept=True)
        p1 = np.clip(expit(X @ self.coefficients), self.eta, 1 - self.eta)
        a = np.broadcast_to(np.asarray(a), p1.shape)
        return np.where(a == 1, p1, 1 - p1)

    def to_dict(self) -> dict:
        names = ["1", *[n for n in self.formula.names if n != "1"]]
        return {"formula": str(self.formula), "eta": self.eta,
                "coefficients": dict(zip(names, map(float, self.coefficients)))}


@dataclass(frozen=True)
class FixedPropensity:
    """Known treatment probability ``P(A = 1) = p``."""

    p: float = 0.5
    name: str = "known"

    def predict(self, a, covariates) -> np.ndarray:
        n = np.atleast_2d(np.asarray(covariates)).shape[0]
        a = np.broadcast_to(np.asarray(a), (n,))
        return np.where(a == 1, self.p, 1 - self.p).astype(float)

    def to_dict(self) -> dict:
        return {"fixed": self.p}


def fit_logistic_propensity(ds: Dataset, formula: str | Formula = "1", eta: float = 0.01,
                            max_iter: int = 50, tol: float = 1e-8,
                            coef_cap: float = 25.0) -> PropensityModel:
    """Maximum-likelihood logistic regression of ``A`` on the formula terms."""
    if ds.treatment.min() == ds.treatment.max():
        raise ValidationError("both treatment groups must be nonempty")
    f = formula if isinstance(formula, Formula) else Formula.parse(formula)
    f = Formula(tuple(t for t in f.terms if all(v != "A" for v, _ in t)), intercept=True)
    X = f.design(0.0, ds.covariates, ds.covariate_names, with_intercept=True)
    y = ds.treatment.astype(float)
    beta = np.zeros(X.shape[1])
    beta[0] = np.log(y.mean() / (1 - y.mean()))
    for _ in range(max_iter):
        p = expit(X @ beta)
        score = X.T @ (y - p)
        if np.linalg.norm(score) < tol * max(1.0, ds.n):
            break
        W = p * (1 - p)
        info = X.T @ (W[:, None] * X)
        try:
            beta = beta + np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SeparationError("singular information in logistic fit") from None
        if np.max(np.abs(beta)) > coef_cap:
            raise SeparationError("logistic coefficients diverge (perfect separation)")
    else:
        raise ConvergenceError("logistic fit did not converge", float(np.linalg.norm(score)))
    return PropensityModel(f, beta, ds.covariate_names, eta)
