"""Simulation design of the randomized-trial study, its ground truth, and replication.

Baseline covariates ``L1, L2 ~ U(-1, 1)`` and ``L3 ~ U(0, 1)``; ``A ~
Bernoulli(p)``. The event hazard is a Weibull baseline (shape 0.7, scale 1.7)
times ``exp(0.7 A 1{t < t'} - 0.225 A 1{t >= t'} + 1.2 L1^2)`` with changepoint
``t' = 0.7``; censoring has the same Weibull baseline, optionally multiplied by
``exp(-0.8 L3 + 1.2 L1 A)``.

The two-cause extension adds a latent cause-2 time with hazard
``kappa * weibull(t; shape2, scale2) * exp(b_A A + b_L1 L1)``; the observed
event type is the earlier cause. Its default constants are choices of this
package, not taken from any published design.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from .data import Dataset

__all__ = [
    "Scenario",
    "StudyError",
    "StudyResult",
    "TrueNuisance",
    "km_ate",
    "mc_psi",
    "replicate_table1",
    "run_study",
    "simulate_competing_risks",
    "simulate_dataset",
    "true_cause_risks",
    "true_psi",
    "true_risk",
]

log = logging.getLogger(__name__)

CENSORING_KINDS = ("covariate_dependent", "independent", "none")


@dataclass(frozen=True)
class Scenario:
    """Parameters of one simulation scenario (defaults reproduce the published design)."""

    censoring: str = "covariate_dependent"
    n: int = 1000
    tau: float = 1.2
    changepoint: float = 0.7
    randomization_prob: float = 0.5
    weibull_shape: float = 0.7
    weibull_scale: float = 1.7
    effect_early: float = 0.7
    effect_late: float = -0.225
    l1_squared: float = 1.2
    censor_shape: float = 0.7
    censor_scale: float = 1.7
    censor_l3: float = -0.8
    censor_l1_a: float = 1.2
    seed: int = 20240607
    # two-cause extension
    cause2_kappa: float = 1.0
    cause2_shape: float = 1.0
    cause2_scale: float = 2.0
    cause2_a: float = -0.3
    cause2_l1: float = 0.5

    def __post_init__(self):
        if self.censoring not in CENSORING_KINDS:
            raise ValueError(f"censoring must be one of {CENSORING_KINDS}")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if not 0 < self.randomization_prob < 1:
            raise ValueError("randomization_prob must be in (0, 1)")

    def overrides(self) -> dict:
        """Fields that differ from the published design."""
        base = Scenario()
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name not in ("seed", "n") and getattr(self, f.name) != getattr(base, f.name)}

    def replace(self, **kw) -> "Scenario":
        return replace(self, **kw)


# ------------------------------------------------------------------- hazards

def _weibull_H(t, shape, scale):
    return (np.asarray(t, dtype=float) / scale) ** shape


def _weibull_Hinv(h, shape, scale):
    return scale * np.asarray(h, dtype=float) ** (1.0 / shape)


def _weibull_rate(t, shape, scale):
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return shape / scale * (t / scale) ** (shape - 1.0)


def event_cumhaz(sc: Scenario, t, a, l1):
    """Cumulative event (cause 1) hazard ``Lambda(t | a, l)``; broadcasts."""
    t, a, l1 = np.broadcast_arrays(np.asarray(t, float), np.asarray(a, float), np.asarray(l1, float))
    H = lambda s: _weibull_H(s, sc.weibull_shape, sc.weibull_scale)  # noqa: E731
    tc = sc.changepoint
    early = np.exp(sc.effect_early * a) * H(np.minimum(t, tc))
    late = np.exp(sc.effect_late * a) * (H(np.maximum(t, tc)) - H(tc))
    return np.exp(sc.l1_squared * l1**2) * (early + late)


def event_rate(sc: Scenario, t, a, l1):
    t = np.asarray(t, float)
    eff = np.where(t < sc.changepoint, sc.effect_early, sc.effect_late) * np.asarray(a, float)
    return _weibull_rate(t, sc.weibull_shape, sc.weibull_scale) * np.exp(eff + sc.l1_squared * np.asarray(l1) ** 2)


def _censor_lp(sc: Scenario, a, L):
    if sc.censoring == "covariate_dependent":
        return sc.censor_l3 * L[..., 2] + sc.censor_l1_a * L[..., 0] * a
    return np.zeros(np.broadcast_shapes(np.shape(a), L.shape[:-1]))


def censor_survival(sc: Scenario, t, a, L):
    """``S^c(t | a, l)``; continuous, so equal to its left limit."""
    if sc.censoring == "none":
        return np.ones(np.broadcast_shapes(np.shape(t), np.shape(a), L.shape[:-1]))
    return np.exp(-_weibull_H(t, sc.censor_shape, sc.censor_scale) * np.exp(_censor_lp(sc, a, L)))


def cause2_cumhaz(sc: Scenario, t, a, l1):
    return (sc.cause2_kappa * _weibull_H(t, sc.cause2_shape, sc.cause2_scale)
            * np.exp(sc.cause2_a * np.asarray(a, float) + sc.cause2_l1 * np.asarray(l1, float)))


def cause2_rate(sc: Scenario, t, a, l1):
    return (sc.cause2_kappa * _weibull_rate(t, sc.cause2_shape, sc.cause2_scale)
            * np.exp(sc.cause2_a * np.asarray(a, float) + sc.cause2_l1 * np.asarray(l1, float)))


def _invert_event(sc: Scenario, e, a, l1):
    """Event time with ``Lambda(T | a, l) = e`` (closed form on both sides of t')."""
    u = e * np.exp(-sc.l1_squared * l1**2)
    r1, r2 = np.exp(sc.effect_early * a), np.exp(sc.effect_late * a)
    Hc = _weibull_H(sc.changepoint, sc.weibull_shape, sc.weibull_scale)
    before = u <= r1 * Hc
    h = np.where(before, u / r1, Hc + (u - r1 * Hc) / r2)
    return _weibull_Hinv(h, sc.weibull_shape, sc.weibull_scale)


# ----------------------------------------------------------------- sampling

def _draw(sc: Scenario, rng: np.random.Generator, n: int, competing: bool):
    L = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(0, 1, n)])
    A = (rng.uniform(size=n) < sc.randomization_prob).astype(np.int64)
    T = _invert_event(sc, rng.standard_exponential(n), A, L[:, 0])
    ec = rng.standard_exponential(n)
    if sc.censoring == "none":
        C = np.full(n, np.inf)
    else:
        C = _weibull_Hinv(ec * np.exp(-_censor_lp(sc, A, L)), sc.censor_shape, sc.censor_scale)
    T2 = np.full(n, np.inf)
    if competing:
        e2 = rng.standard_exponential(n)
        if sc.cause2_kappa > 0:
            scale = sc.cause2_kappa * np.exp(sc.cause2_a * A + sc.cause2_l1 * L[:, 0])
            T2 = _weibull_Hinv(e2 / scale, sc.cause2_shape, sc.cause2_scale)
    return L, A, T, T2, C


def _rng(sc: Scenario, rng) -> np.random.Generator:
    if rng is None:
        return np.random.default_rng(sc.seed)
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def simulate_dataset(sc: Scenario, rng=None) -> Dataset:
    """Draw ``sc.n`` records from the single-cause design (deterministic given the seed)."""
    L, A, T, _, C = _draw(sc, _rng(sc, rng), sc.n, competing=False)
    time = np.minimum(T, C)
    event = (T <= C).astype(np.int64)
    return Dataset(time, event, A, L, sc.tau, J=1)


def simulate_competing_risks(sc: Scenario, rng=None) -> Dataset:
    """Draw from the two-cause extension; ``cause2_kappa = 0`` reduces to one cause."""
    L, A, T, T2, C = _draw(sc, _rng(sc, rng), sc.n, competing=True)
    time = np.minimum(np.minimum(T, T2), C)
    event = np.where(C < np.minimum(T, T2), 0, np.where(T <= T2, 1, 2)).astype(np.int64)
    return Dataset(time, event, A, L, sc.tau, J=2)


# -------------------------------------------------------------------- truth

def _legendre(nodes: int = 64):
    x, w = np.polynomial.legendre.leggauss(nodes)
    return x, w / 2.0          # expectation over U(-1, 1)


def true_risk(sc: Scenario, a: int, nodes: int = 64) -> float:
    """``P(T^a <= tau)`` under treatment ``a`` (cause 1 only, no competing cause)."""
    x, w = _legendre(nodes)
    return float(1.0 - np.sum(w * np.exp(-event_cumhaz(sc, sc.tau, a, x))))


def true_psi(sc: Scenario, nodes: int = 64) -> float:
    """True average treatment effect on the tau-risk scale, ``F(tau|1) - F(tau|0)``."""
    return true_risk(sc, 1, nodes) - true_risk(sc, 0, nodes)


def mc_psi(sc: Scenario, draws: int = 10_000_000, seed: int = 1, chunk: int = 1_000_000) -> tuple[float, float]:
    """Monte Carlo ATE with common random numbers across arms; returns (estimate, SE)."""
    rng = np.random.default_rng(seed)
    total, total_sq, done = 0.0, 0.0, 0
    while done < draws:
        m = min(chunk, draws - done)
        l1 = rng.uniform(-1, 1, m)
        e = rng.standard_exponential(m)
        diff = (_invert_event(sc, e, 1, l1) <= sc.tau).astype(float) \
            - (_invert_event(sc, e, 0, l1) <= sc.tau).astype(float)
        total += diff.sum()
        total_sq += (diff**2).sum()
        done += m
    mean = total / draws
    return mean, math.sqrt((total_sq / draws - mean**2) / draws)


def true_cause_risks(sc: Scenario, a: int, t: float | None = None, nodes: int = 64,
                     time_nodes: int = 200) -> tuple[float, float, float]:
    """``(F1(t), F2(t), S(t))`` under treatment ``a`` in the two-cause design."""
    t = sc.tau if t is None else t
    x, w = _legendre(nodes)
    v, wv = np.polynomial.legendre.leggauss(time_nodes)
    v, wv = (v + 1) / 2, wv / 2
    # [0, t0]: substitute s = t0 v^10, which turns the t^(shape-1) singularity
    # at 0 into a polynomial for shapes that are multiples of 0.1;
    # [t0, t]: plain Gauss-Legendre. Splitting at the changepoint keeps both
    # pieces smooth.
    t0 = min(t, sc.changepoint)
    s = np.concatenate([t0 * v**10, t0 + (t - t0) * v])
    ds = np.concatenate([10 * t0 * v**9 * wv, (t - t0) * wv])
    F1 = F2 = S = 0.0
    for xi, wi in zip(x, w):
        surv = np.exp(-event_cumhaz(sc, s, a, xi) - cause2_cumhaz(sc, s, a, xi))
        F1 += wi * np.sum(ds * surv * event_rate(sc, s, a, xi))
        F2 += wi * np.sum(ds * surv * cause2_rate(sc, s, a, xi))
        S += wi * float(np.exp(-event_cumhaz(sc, t, a, xi) - cause2_cumhaz(sc, t, a, xi)))
    return float(F1), float(F2), float(S)


@dataclass(frozen=True)
class TrueNuisance:
    """Data-generating nuisances of a scenario, as functions of ``(t, a, L)``."""

    scenario: Scenario

    def propensity(self, a, L) -> np.ndarray:
        p = self.scenario.randomization_prob
        a = np.broadcast_to(np.asarray(a), (np.atleast_2d(L).shape[0],))
        return np.where(a == 1, p, 1 - p)

    def cumulative_hazard(self, t, a, L) -> np.ndarray:
        return event_cumhaz(self.scenario, t, a, np.asarray(L)[..., 0])

    def hazard(self, t, a, L) -> np.ndarray:
        return event_rate(self.scenario, t, a, np.asarray(L)[..., 0])

    def survival(self, t, a, L) -> np.ndarray:
        return np.exp(-self.cumulative_hazard(t, a, L))

    def censoring_survival(self, t, a, L) -> np.ndarray:
        return censor_survival(self.scenario, t, a, np.asarray(L))


# ----------------------------------------------------------------- studies

ESTIMATORS = ("km", "cox_tmle", "hal_tmle")
Z_975 = 1.959964


class StudyError(RuntimeError):
    code = "study.failures"


def km_ate(ds: Dataset) -> tuple[float, float]:
    """Kaplan-Meier risk difference at tau (arm 1 minus arm 0) with Greenwood SE."""
    from .nuisance import fit_kaplan_meier

    psi, var = 0.0, 0.0
    for a, sign in ((1, 1.0), (0, -1.0)):
        km = fit_kaplan_meier(ds, arm=a)
        psi += sign * (1.0 - float(km(ds.tau)))
        var += float(km.greenwood(ds.tau))
    return psi, math.sqrt(var)


def default_specs(sc: Scenario, censor_formula: str = "L3 + L1:A",
                  event_formula: str = "A + L1", **hal) -> dict:
    """Estimator specifications of the replication study."""
    from .pipeline import EstimatorSpec

    common = dict(censor_model=f"cox:{censor_formula}",
                  propensity=f"fixed:{sc.randomization_prob}")
    hal_kw = dict(grid_size=10, grid_strategy="uniform", knots=8, knot_strategy="quantile",
                  order=2)
    hal_kw.update(hal)
    return {
        "cox_tmle": EstimatorSpec(event_model=f"cox:{event_formula}", **common),
        "hal_tmle": EstimatorSpec(event_model="hal", **common, **hal_kw),
    }


@dataclass
class StudyResult:
    """Replication records and Table-1 style metrics per estimator."""

    scenario: Scenario
    truth: float
    reps: int
    estimators: tuple[str, ...]
    records: list[dict]
    metrics: dict = field(default_factory=dict)

    def estimates(self, estimator: str) -> np.ndarray:
        return np.array([r["psi"] for r in self.records
                         if r["estimator"] == estimator and r["error"] == ""])

    def compute_metrics(self, max_failure_rate: float = 0.02) -> dict:
        out = {}
        mse_ref = None
        for est in self.estimators:
            rows = [r for r in self.records if r["estimator"] == est]
            ok = [r for r in rows if r["error"] == ""]
            fails = len(rows) - len(ok)
            if rows and fails / len(rows) > max_failure_rate:
                raise StudyError(f"{est}: {fails} of {len(rows)} replications failed")
            psi = np.array([r["psi"] for r in ok])
            cover = np.array([r["covered"] for r in ok], dtype=float)
            err = psi - self.truth
            mse = float(np.mean(err**2)) if ok else float("nan")
            if est == "km":
                mse_ref = mse
            out[est] = {
                "bias": float(err.mean()) if ok else float("nan"),
                "bias_mc_se": float(err.std(ddof=1) / math.sqrt(len(ok))) if len(ok) > 1 else float("nan"),
                "coverage": float(cover.mean()) if ok else float("nan"),
                "rmse": math.sqrt(mse),
                "mse": mse,
                "mean_se": float(np.mean([r["se"] for r in ok])) if ok else float("nan"),
                "sd": float(psi.std(ddof=1)) if len(ok) > 1 else float("nan"),
                "failures": fails,
                "n_ok": len(ok),
            }
        for est in out:
            out[est]["rel_mse"] = (out[est]["mse"] / mse_ref) if mse_ref else float("nan")
        self.metrics = out
        return out

    def summary(self) -> dict:
        return {
            "scenario": asdict(self.scenario),
            "overrides": self.scenario.overrides(),
            "truth": self.truth,
            "reps": self.reps,
            "metrics": self.metrics,
        }

    def write(self, out_dir, prefix: str = "study") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["rep", "estimator", "psi", "se", "lower", "upper", "covered", "iterations",
                "error"]
        with (out / f"{prefix}_replications.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in cols})
        (out / f"{prefix}_summary.json").write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _one_replication(args) -> list[dict]:
    from .pipeline import fit_nuisances
    from .tmle import Intervention, TargetingConfig, targeted_estimate

    sc, rep, seed_seq, estimators, specs, truth, mode, competing = args
    rng = np.random.default_rng(seed_seq)
    ds = (simulate_competing_risks if competing else simulate_dataset)(sc, rng)
    rows = []
    for est in estimators:
        row = {"rep": rep, "estimator": est, "psi": float("nan"), "se": float("nan"),
               "lower": float("nan"), "upper": float("nan"), "covered": False,
               "iterations": 0, "error": ""}
        try:
            if est == "km":
                psi, se = km_ate(ds)
                it = 0
            else:
                nuis = fit_nuisances(ds, specs[est], rng)
                rep_ = targeted_estimate(ds, nuis, Intervention.ate(), mode=mode,
                                         config=TargetingConfig())
                if rep_.targeting.stop_reason != "converged":
                    raise RuntimeError(f"targeting stopped: {rep_.targeting.stop_reason}")
                psi, se, it = rep_.psi_hat, rep_.se, rep_.iterations
            lo, hi = psi - Z_975 * se, psi + Z_975 * se
            row.update(psi=float(psi), se=float(se), lower=float(lo), upper=float(hi),
                       covered=bool(lo <= truth <= hi), iterations=int(it))
        except Exception as exc:  # recorded and counted, never silently dropped
            row["error"] = f"{type(exc).__name__}: {exc}"
            log.warning("replication %d, %s failed: %s", rep, est, exc)
        rows.append(row)
    return rows


def run_study(sc: Scenario, reps: int = 500, estimators: Sequence[str] = ESTIMATORS,
              specs: dict | None = None, mode: str = "iterative", n_jobs: int = 1,
              truth: float | None = None, progress: Callable[[int], None] | None = None,
              max_failure_rate: float = 0.02) -> StudyResult:
    """Replicate the simulation ``reps`` times and summarise each estimator.

    Replication ``r`` draws its data (and CV folds) from the ``r``-th child of
    ``SeedSequence(sc.seed)``, so results do not depend on ``n_jobs``.
    """
    if reps < 2:
        raise ValueError("reps must be >= 2")
    unknown = set(estimators) - {"km"} - set(specs or default_specs(sc))
    if unknown:
        raise ValueError(f"unknown estimators {sorted(unknown)}")
    specs = specs or default_specs(sc)
    truth = true_psi(sc) if truth is None else truth
    children = np.random.SeedSequence(sc.seed).spawn(reps)
    jobs = [(sc, r, children[r], tuple(estimators), specs, truth, mode, False)
            for r in range(reps)]
    records: list[dict] = []
    if n_jobs == 1:
        for r, job in enumerate(jobs):
            records.extend(_one_replication(job))
            if progress:
                progress(r + 1)
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            for r, rows in enumerate(pool.map(_one_replication, jobs, chunksize=4)):
                records.extend(rows)
                if progress:
                    progress(r + 1)
    result = StudyResult(sc, truth, reps, tuple(estimators), records)
    result.compute_metrics(max_failure_rate)
    return result


def replicate_table1(reps: int = 500, n: int = 1000, seed: int = 20240607, n_jobs: int = 1,
                     mode: str = "iterative", progress=None) -> dict[str, StudyResult]:
    """Both censoring scenarios with all three estimators."""
    out = {}
    for k, kind in enumerate(("covariate_dependent", "independent")):
        sc = Scenario(censoring=kind, n=n, seed=seed + k)
        out[kind] = run_study(sc, reps, ESTIMATORS, mode=mode, n_jobs=n_jobs, progress=progress)
    return out


def table1_rows(results: dict[str, StudyResult]) -> list[dict]:
    """Flatten study results into rows ``(scenario, estimator, bias, coverage, rmse, rel_mse)``."""
    rows = []
    for kind, res in results.items():
        for est in res.estimators:
            m = res.metrics[est]
            rows.append({"scenario": kind, "estimator": est, "bias": m["bias"],
                         "coverage": m["coverage"], "rmse": m["rmse"], "rel_mse": m["rel_mse"]})
    return rows
