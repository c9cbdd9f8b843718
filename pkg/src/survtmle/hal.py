"""Highly adaptive lasso for conditional hazards via L1-penalised Poisson regression.

The log-hazard is modelled as

    f(t, z) = sum_r sum_c beta[r, c] 1{t >= t_r} phi_c(z)

where ``t_r`` are the left endpoints of a time grid and ``phi_c`` are
zero-order indicator splines ``1{z_S >= knot}`` over sections ``S`` of
``z = (A, L_1, ..., L_d)``; ``phi_0 = 1`` is the constant column, so
``beta[0, 0]`` is the unpenalised intercept. Subjects with the same indicator
row form a cell; events and person-time are aggregated over (cell, interval)
and the penalised Poisson likelihood is minimised by exact coordinate descent.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _cd
from .data import Dataset, TimeGrid, ValidationError, event_time_grid, uniform_grid
from .nuisance import ConvergenceError

__all__ = [
    "AggregatedPoissonData",
    "BasisTooLargeError",
    "HalBasis",
    "HalModel",
    "aggregate",
    "build_basis",
    "cross_validate_bound",
    "fit_l1_poisson",
    "kkt_violation",
    "lambda_max",
    "penalty_path",
    "poisson_objective",
    "subject_negloglik",
]

log = logging.getLogger(__name__)

COEF_CAP = 30.0


class BasisTooLargeError(ValueError):
    code = "hal.basis_too_large"


# ---------------------------------------------------------------------- basis

@dataclass(frozen=True, eq=False)
class HalBasis:
    """Indicator basis over a time grid and covariate knots.

    Attributes
    ----------
    grid : TimeGrid
        ``K`` intervals; time column ``r`` is ``1{t >= t_r}`` (``r = 0`` is 1).
    coordinate_names : tuple of str
        ``("A", L names...)``; coordinate 0 is the treatment.
    knots : tuple of arrays
        Knot values per coordinate; the treatment has the single knot 1.
    columns : tuple of (section, knot indices)
        z-columns after deduplication; entry 0 is the constant ``((), ())``.
    """

    grid: TimeGrid
    coordinate_names: tuple[str, ...]
    knots: tuple[np.ndarray, ...]
    columns: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]
    max_section_order: int = 2

    @property
    def n_intervals(self) -> int:
        return self.grid.n_intervals

    @property
    def n_zcolumns(self) -> int:
        return len(self.columns)

    @property
    def n_columns(self) -> int:
        return self.n_intervals * self.n_zcolumns

    @property
    def sections(self) -> list[tuple[int, ...]]:
        return sorted({S for S, _ in self.columns if S}, key=lambda S: (len(S), S))

    def z_matrix(self, treatment, covariates) -> np.ndarray:
        """Evaluate the z-columns: boolean array of shape (n, C)."""
        return _evaluate_columns(_stack_z(treatment, covariates), self.knots, self.columns)

    def column_key(self, r: int, c: int) -> str:
        S, m = self.columns[c]
        return f"{r}|{','.join(self.coordinate_names[s] for s in S)}|{','.join(map(str, m))}"

    def labels(self) -> list[str]:
        return [self.column_key(r, c) for r in range(self.n_intervals)
                for c in range(self.n_zcolumns)]

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_list(),
            "coordinates": list(self.coordinate_names),
            "knots": [k.tolist() for k in self.knots],
            "sections": [[self.coordinate_names[s] for s in S] for S in self.sections],
            "columns": [[list(S), list(m)] for S, m in self.columns],
            "max_section_order": self.max_section_order,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HalBasis":
        return cls(TimeGrid(np.asarray(d["grid"], float)), tuple(d["coordinates"]),
                   tuple(np.asarray(k, float) for k in d["knots"]),
                   tuple((tuple(S), tuple(m)) for S, m in d["columns"]),
                   d.get("max_section_order", 2))


def _stack_z(treatment, covariates) -> np.ndarray:
    cov = np.asarray(covariates, dtype=float)
    if cov.ndim == 1:
        cov = cov[None, :]
    a = np.broadcast_to(np.asarray(treatment, dtype=float), (cov.shape[0],))
    return np.column_stack([a, cov])


def _evaluate_columns(z, knots, columns) -> np.ndarray:
    ind = [z[:, k][:, None] >= kn[None, :] for k, kn in enumerate(knots)]
    out = np.ones((z.shape[0], len(columns)), dtype=bool)
    for c, (S, m) in enumerate(columns):
        for s, j in zip(S, m):
            out[:, c] &= ind[s][:, j]
    return out


def _covariate_knots(x: np.ndarray, K: int, strategy: str) -> np.ndarray:
    levels = np.arange(1, K + 1) / (K + 1)
    if strategy == "quantile":
        kn = np.quantile(x, levels)
    elif strategy == "uniform":
        lo, hi = float(x.min()), float(x.max())
        kn = lo + (hi - lo) * levels
    else:
        raise ValueError(f"unknown knot strategy {strategy!r}")
    return np.unique(kn)


def build_basis(ds: Dataset, R: int | TimeGrid = 10, knots_per_covariate: int = 8,
                max_section_order: int = 2, knot_strategy: str = "quantile",
                grid_strategy: str = "quantile", column_cap: int = 50_000) -> HalBasis:
    """Enumerate the HAL indicator basis for ``ds``.

    Parameters
    ----------
    R : int or TimeGrid
        Number of time intervals on ``[0, tau]`` (or an explicit grid).
    knots_per_covariate : int
        Knots per covariate at empirical quantiles (or equally spaced).
    max_section_order : int
        Largest section size among the coordinates ``(A, L_1, ..., L_d)``.
    column_cap : int
        Refuse bases with more than this many columns in total.
    """
    if knots_per_covariate < 1:
        raise ValueError("knots_per_covariate must be >= 1")
    if not 1 <= max_section_order <= ds.d + 1:
        raise ValueError(f"max_section_order must be in 1..{ds.d + 1}")
    if isinstance(R, TimeGrid):
        grid = R
    elif grid_strategy == "uniform":
        grid = uniform_grid(ds.tau, int(R))
    else:
        grid = event_time_grid(ds, int(R), grid_strategy)

    knots = [np.array([1.0])]
    for k in range(ds.d):
        knots.append(_covariate_knots(ds.covariates[:, k], knots_per_covariate, knot_strategy))
    candidates = [((), ())]
    for order in range(1, max_section_order + 1):
        for S in itertools.combinations(range(ds.d + 1), order):
            for m in itertools.product(*(range(knots[s].size) for s in S)):
                candidates.append((S, m))
    if grid.n_intervals * len(candidates) > 20 * column_cap:
        raise BasisTooLargeError(
            f"basis would have {grid.n_intervals * len(candidates)} columns before "
            f"deduplication; lower the knots, order or grid size")

    Z = _evaluate_columns(_stack_z(ds.treatment, ds.covariates), knots, candidates)
    keep = [0]
    col_count = Z.sum(axis=0)
    seen = {Z[:, 0].tobytes()}
    for c in range(1, len(candidates)):
        if col_count[c] == 0 or col_count[c] == ds.n:
            continue
        key = Z[:, c].tobytes()
        if key in seen:
            continue
        seen.add(key)
        keep.append(c)
    columns = tuple(candidates[c] for c in keep)
    total = grid.n_intervals * len(columns)
    if total > column_cap:
        raise BasisTooLargeError(
            f"HAL basis has {total} columns (cap {column_cap}); use fewer knots, a "
            f"coarser time grid or a lower section order")
    names = ("A", *ds.covariate_names)
    return HalBasis(grid, names, tuple(knots), columns, max_section_order)


# ---------------------------------------------------------------- aggregation

@dataclass(frozen=True, eq=False)
class AggregatedPoissonData:
    """Event counts and person-time per (cell, interval).

    ``Z[m]`` is the z-indicator row shared by all subjects of cell ``m``;
    ``cell_of[i]`` maps subjects to cells.
    """

    Z: np.ndarray
    D: np.ndarray
    R_time: np.ndarray
    cell_of: np.ndarray
    n_subjects: int
    event_type: int = 1

    @property
    def n_cells(self) -> int:
        return self.Z.shape[0]

    @property
    def cells(self) -> list[tuple[int, int, float, float]]:
        M, K = self.D.shape
        return [(m, r, float(self.D[m, r]), float(self.R_time[m, r]))
                for m in range(M) for r in range(K)]

    def drop_empty(self) -> "AggregatedPoissonData":
        """Remove cells without any person-time."""
        keep = self.R_time.sum(axis=1) > 0
        remap = np.cumsum(keep) - 1
        return AggregatedPoissonData(self.Z[keep], self.D[keep], self.R_time[keep],
                                     np.where(keep[self.cell_of], remap[self.cell_of], -1),
                                     self.n_subjects, self.event_type)


def aggregate(ds: Dataset, basis: HalBasis, event_type: int = 1) -> AggregatedPoissonData:
    """Aggregate events of type ``event_type`` (0 = censoring) and risk time.

    An event at ``T~`` counts in the interval ``(t_r, t_{r+1}]`` containing it;
    risk time in interval ``r`` is ``(min(T~, t_{r+1}) - t_r)^+``.
    """
    if not 0 <= event_type <= ds.J:
        raise ValueError(f"event_type must be in 0..{ds.J}")
    grid = basis.grid
    Zs = basis.z_matrix(ds.treatment, ds.covariates)
    packed = np.packbits(Zs, axis=1)
    _, first, cell_of = np.unique(packed, axis=0, return_index=True, return_inverse=True)
    cell_of = cell_of.reshape(-1)
    M, K = first.size, grid.n_intervals
    k = grid.event_interval(ds.time)
    hit = (ds.event == event_type) & (k >= 0)
    D = np.zeros((M, K))
    np.add.at(D, (cell_of[hit], k[hit]), 1.0)
    R_time = np.zeros((M, K))
    np.add.at(R_time, cell_of, grid.exposure(ds.time))
    return AggregatedPoissonData(Zs[first], D, R_time, cell_of, ds.n, event_type)


def _linear_predictor(Z: np.ndarray, beta: np.ndarray) -> np.ndarray:
    return np.cumsum(Z.astype(float) @ beta.T, axis=1)


def poisson_objective(agg: AggregatedPoissonData, beta: np.ndarray) -> float:
    """``sum_{m,r} R e^f - D f`` for coefficients ``beta`` of shape (K, C)."""
    eta = _linear_predictor(agg.Z, beta)
    return float(np.sum(agg.R_time * np.exp(eta)) - np.sum(agg.D * eta))


def subject_negloglik(ds: Dataset, basis: HalBasis, beta: np.ndarray,
                      event_type: int = 1) -> float:
    """Per-subject discretised negative log-likelihood of the piecewise-constant hazard.

    Sums, over subjects and intervals, the compensator ``exposure * exp(f)``
    minus ``f`` at the interval holding the subject's event.
    """
    grid = basis.grid
    eta = _linear_predictor(basis.z_matrix(ds.treatment, ds.covariates), beta)
    total = 0.0
    for i in range(ds.n):
        expo = grid.exposure(ds.time[i:i + 1])[0]
        total += float(np.dot(expo, np.exp(eta[i])))
        k = int(grid.event_interval(ds.time[i]))
        if ds.event[i] == event_type and k >= 0:
            total -= float(eta[i, k])
    return total


# ---------------------------------------------------------------------- solver

class _Problem:
    """Compressed-column form of an aggregated problem ready for the kernel."""

    def __init__(self, agg: AggregatedPoissonData):
        keep = agg.R_time.sum(axis=1) > 0
        self.Z = agg.Z[keep]
        self.D = np.ascontiguousarray(agg.D[keep])
        self.R = np.ascontiguousarray(agg.R_time[keep])
        self.n = agg.n_subjects
        rows, cols = np.nonzero(self.Z.T)
        C = self.Z.shape[1]
        self.col_ptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=C))]).astype(np.int64)
        self.col_rows = cols.astype(np.int64)
        self.B = _cd.column_event_sums(self.col_ptr, self.col_rows, self.D)
        self.K, self.C = self.D.shape[1], C
        self.total_events = float(self.D.sum())
        self.total_time = float(self.R.sum())
        self.all_cols = np.arange(C, dtype=np.int64)
        self.rows = np.nonzero(self.R > 0)

    def null_beta(self) -> np.ndarray:
        beta = np.zeros((self.K, self.C))
        beta[0, 0] = np.log(self.total_events / self.total_time)
        return beta

    def state(self, beta):
        eta = np.ascontiguousarray(_linear_predictor(self.Z, beta))
        return eta, self.R * np.exp(eta)

    def objective(self, beta, eta, mu, lam_sum) -> float:
        pen = np.abs(beta).sum() - abs(beta[0, 0])
        return float(mu.sum() - np.sum(self.D * eta) + lam_sum * pen)


def lambda_max(agg: AggregatedPoissonData) -> float:
    """Smallest mean-scale penalty at which every penalised coefficient is zero."""
    prob = _Problem(agg)
    return _lambda_max(prob)


def _lambda_max(prob: _Problem) -> float:
    if prob.total_events <= 0:
        raise ValidationError("no events to fit a hazard")
    beta = prob.null_beta()
    eta, mu = prob.state(beta)
    G = _cd.gradient(prob.col_ptr, prob.col_rows, mu, prob.B)
    G[0, 0] = 0.0
    return float(np.abs(G).max()) / prob.n


def penalty_path(agg: AggregatedPoissonData, n_penalties: int = 30,
                 ratio: float = 1e-3) -> np.ndarray:
    """Log-spaced penalties from ``lambda_max`` down to ``ratio * lambda_max``."""
    lmax = lambda_max(agg)
    return np.geomspace(lmax, lmax * ratio, n_penalties)


def _newton_polish(prob: _Problem, beta: np.ndarray, lam_sum: float, gtol: float,
                   max_iter: int = 50) -> None:
    """Newton iterations on the current nonzero coefficients with their signs fixed.

    A coefficient whose Newton path would cross zero is stopped at zero and
    leaves the active set; coordinate sweeps re-admit it if the KKT conditions
    demand. ``beta`` is modified in place.
    """
    flat = beta.reshape(-1)
    act = np.flatnonzero(flat)
    if act.size == 0:
        return
    rows_m, rows_r = prob.rows
    D, R = prob.D[rows_m, rows_r], prob.R[rows_m, rows_r]
    X = None
    for _ in range(max_iter):
        if X is None:
            rp, c = np.divmod(act, prob.C)
            X = (prob.Z[rows_m][:, c] & (rows_r[:, None] >= rp[None, :])).astype(float)
            sgn = np.sign(flat[act])
            sgn[act == 0] = 0.0
        b = flat[act]
        eta = X @ b
        mu = R * np.exp(eta)
        g = X.T @ (mu - D) + lam_sum * sgn
        if np.max(np.abs(g)) <= gtol:
            return
        H = X.T @ (mu[:, None] * X)
        H[np.diag_indices_from(H)] += 1e-10 * max(1.0, np.trace(H) / act.size)
        try:
            d = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return
        with np.errstate(divide="ignore", invalid="ignore"):
            cross = np.where((sgn != 0) & (np.sign(b + d) != sgn), -b / d, np.inf)
        tmax = float(cross.min()) if cross.size else np.inf
        t = min(1.0, tmax)
        f0 = float(mu.sum() - D @ eta + lam_sum * sgn @ b)
        slope = float(g @ d)
        while t > 1e-12:
            e = X @ (b + t * d)
            if np.max(e) < 50 and \
                    float((R * np.exp(e)).sum() - D @ e + lam_sum * sgn @ (b + t * d)) \
                    <= f0 + 1e-4 * t * slope:
                break
            t /= 2
        else:
            return
        flat[act] = b + t * d
        if t == tmax:
            hit = cross <= tmax * (1 + 1e-12)
            flat[act[hit]] = 0.0
            act = act[~hit]
            X = None
            if act.size == 0:
                return


def _solve(prob: _Problem, lam: float, beta: np.ndarray, tol: float,
           max_sweeps: int) -> tuple[np.ndarray, int]:
    """Minimise at mean-scale penalty ``lam`` starting from ``beta`` (modified in place).

    Exact coordinate sweeps identify the active set; Newton steps on that set
    finish the job, and a final full sweep certifies the KKT conditions.
    """
    lam_sum = lam * prob.n
    gtol = tol * prob.n
    eta, mu = prob.state(beta)
    sweeps = 0
    last_obj = prob.objective(beta, eta, mu, lam_sum)
    delta = np.inf
    while True:
        worst = _cd.sweep(prob.all_cols, prob.col_ptr, prob.col_rows, mu, eta, prob.B,
                          beta, lam_sum, COEF_CAP)
        sweeps += 1
        if worst <= gtol:
            break
        active = np.flatnonzero(np.any(beta != 0.0, axis=0)).astype(np.int64)
        for _ in range(3):
            worst = _cd.sweep(active, prob.col_ptr, prob.col_rows, mu, eta, prob.B,
                              beta, lam_sum, COEF_CAP)
            sweeps += 1
            if worst <= gtol:
                break
        if worst > gtol:
            _newton_polish(prob, beta, lam_sum, gtol)
        eta, mu = prob.state(beta)
        obj = prob.objective(beta, eta, mu, lam_sum)
        delta, last_obj = last_obj - obj, obj
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"coordinate descent did not converge in {max_sweeps} sweeps "
                f"(last objective change {delta:.3g})", delta)
    return beta, sweeps


def _kkt_violation(prob: _Problem, beta: np.ndarray, lam: float) -> float:
    eta, mu = prob.state(beta)
    G = _cd.gradient(prob.col_ptr, prob.col_rows, mu, prob.B) / prob.n
    pen = np.full_like(beta, lam)
    pen[0, 0] = 0.0
    nz = beta != 0
    free = np.abs(beta) < COEF_CAP
    viol = np.where(nz, np.abs(G + np.sign(beta) * pen), np.maximum(np.abs(G) - pen, 0.0))
    return float(np.max(np.where(free | ~nz, viol, 0.0)))


def kkt_violation(agg: AggregatedPoissonData, beta: np.ndarray, penalty: float) -> float:
    """Largest violation of the lasso optimality conditions on the mean scale.

    Zero (up to solver tolerance) exactly when ``beta`` minimises
    ``objective / n + penalty * ||beta||_1`` (intercept unpenalised); coefficients
    held at the magnitude cap are exempt.
    """
    return _kkt_violation(_Problem(agg), np.asarray(beta, dtype=float), penalty)


# ---------------------------------------------------------------------- model

@dataclass(frozen=True, eq=False)
class HalModel:
    """Fitted HAL log-hazard ``f(t, z)``.

    ``beta`` has shape (K, C); ``penalty`` is on the per-subject (mean) scale
    and ``bound`` is the L1 norm of the penalised coefficients.
    """

    basis: HalBasis
    beta: np.ndarray
    penalty: float
    event_type: int = 1
    sweeps: int = 0
    cv: dict | None = field(default=None)

    @property
    def bound(self) -> float:
        return float(np.abs(self.beta).sum() - abs(self.beta[0, 0]))

    @property
    def intercept(self) -> float:
        return float(self.beta[0, 0])

    def log_hazard(self, treatment, covariates) -> np.ndarray:
        """``f(t_r, z)`` for each row and interval: shape (n, K)."""
        return _linear_predictor(self.basis.z_matrix(treatment, covariates), self.beta)

    def hazard(self, treatment, covariates) -> np.ndarray:
        return np.exp(self.log_hazard(treatment, covariates))

    def coefficient_map(self) -> dict[str, float]:
        K, C = self.beta.shape
        return {self.basis.column_key(r, c): float(self.beta[r, c])
                for r in range(K) for c in range(C) if self.beta[r, c] != 0.0}

    def to_dict(self) -> dict:
        out = {"basis": self.basis.to_dict(), "penalty": self.penalty, "bound": self.bound,
               "event_type": self.event_type,
               "coefficients": {f"{r}:{c}": float(self.beta[r, c])
                                for r, c in zip(*np.nonzero(self.beta))},
               "coefficient_labels": self.coefficient_map()}
        if self.cv is not None:
            out["cv"] = self.cv
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "HalModel":
        basis = HalBasis.from_dict(d["basis"])
        beta = np.zeros((basis.n_intervals, basis.n_zcolumns))
        for key, v in d["coefficients"].items():
            r, c = map(int, key.split(":"))
            beta[r, c] = v
        return cls(basis, beta, float(d["penalty"]), int(d.get("event_type", 1)), 0, d.get("cv"))


def fit_l1_poisson(agg: AggregatedPoissonData, basis: HalBasis, penalty: float | None = None,
                   bound: float | None = None, tol: float = 1e-7, max_sweeps: int = 5000,
                   warm_start: np.ndarray | None = None) -> HalModel:
    """Minimise the aggregated Poisson loss plus ``n * penalty * ||beta||_1``.

    The intercept ``beta[0, 0]`` is not penalised. Give either a mean-scale
    ``penalty`` or a target ``bound`` on the L1 norm; the latter is reached by
    bisection over the penalty.
    """
    prob = _Problem(agg)
    if prob.total_events <= 0:
        raise ValidationError("no events to fit a hazard")
    if (penalty is None) == (bound is None):
        raise ValueError("give exactly one of penalty or bound")
    if bound is not None:
        return _fit_bound(prob, agg, basis, float(bound), tol, max_sweeps)
    if penalty < 0:
        raise ValueError("penalty must be nonnegative")
    beta = prob.null_beta() if warm_start is None else np.array(warm_start, dtype=float)
    beta, sweeps = _solve(prob, float(penalty), beta, tol, max_sweeps)
    return HalModel(basis, beta, float(penalty), agg.event_type, sweeps)


def _fit_bound(prob, agg, basis, bound, tol, max_sweeps) -> HalModel:
    lmax = _lambda_max(prob)
    if bound <= 0:
        beta, sw = _solve(prob, lmax, prob.null_beta(), tol, max_sweeps)
        return HalModel(basis, beta, lmax, agg.event_type, sw)
    lo, hi = np.log(lmax * 1e-6), np.log(lmax)
    best = None
    beta = prob.null_beta()
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        beta, sw = _solve(prob, float(np.exp(mid)), beta, tol, max_sweeps)
        norm = np.abs(beta).sum() - abs(beta[0, 0])
        if norm > bound:
            lo = mid
        else:
            hi, best = mid, (beta.copy(), sw)
        if hi - lo < 1e-4:
            break
    if best is None:
        best = _solve(prob, float(np.exp(hi)), prob.null_beta(), tol, max_sweeps)
    return HalModel(basis, best[0], float(np.exp(hi)), agg.event_type, best[1])


def _fit_path(prob: _Problem, penalties, tol, max_sweeps) -> list[np.ndarray]:
    beta = prob.null_beta()
    out = []
    for lam in penalties:
        beta, _ = _solve(prob, float(lam), beta, tol, max_sweeps)
        out.append(beta.copy())
    return out


def _validation_loss(agg: AggregatedPoissonData, beta: np.ndarray) -> float:
    return poisson_objective(agg, beta) / agg.n_subjects


def _folds(ds: Dataset, V: int, rng: np.random.Generator, event_type: int) -> np.ndarray:
    for attempt in range(2):
        fold = rng.permutation(np.arange(ds.n) % V)
        hit = ds.event == event_type
        ok = all(hit[fold != v].any() and hit[fold == v].any() for v in range(V))
        if ok:
            return fold
        log.warning("CV fold without events; resampling fold assignment")
    raise ValidationError(f"a cross-validation fold has no events of type {event_type}")


def cross_validate_bound(ds: Dataset, basis: HalBasis, candidates=None, folds: int = 5,
                         event_type: int = 1, seed: int | np.random.Generator | None = 0,
                         tol: float = 1e-7, max_sweeps: int = 5000,
                         patience: int | None = 3) -> HalModel:
    """Select the penalty by subject-level V-fold cross-validation and refit.

    ``candidates`` are mean-scale penalties; by default the 30-point path from
    ``lambda_max`` down to ``1e-3 * lambda_max``. The validation loss is the
    held-out Poisson negative log-likelihood per subject. Candidates are
    visited from the largest penalty down; once the mean validation loss has
    risen ``patience`` times in a row above its running minimum, the remaining
    (smaller) penalties are not fitted and their loss is recorded as NaN
    (``patience=None`` evaluates the whole grid). The loss curve is stored in
    ``model.cv``.
    """
    full = aggregate(ds, basis, event_type)
    prob = _Problem(full)
    if candidates is None:
        lmax = _lambda_max(prob)
        candidates = np.geomspace(lmax, lmax * 1e-3, 30)
    candidates = np.sort(np.asarray(candidates, dtype=float))[::-1]
    if candidates.size == 0:
        raise ValueError("candidates must be nonempty")
    if candidates.size == 1:
        beta, sw = _solve(prob, float(candidates[0]), prob.null_beta(), tol, max_sweeps)
        return HalModel(basis, beta, float(candidates[0]), event_type, sw,
                        {"penalties": candidates.tolist(), "loss": [float("nan")],
                         "selected": 0, "folds": 0})
    if folds < 2:
        raise ValueError("folds must be >= 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fold = _folds(ds, folds, rng, event_type)
    problems, valids, betas = [], [], []
    for v in range(folds):
        tr = _Problem(aggregate(ds.subset(fold != v), basis, event_type))
        problems.append(tr)
        valids.append(aggregate(ds.subset(fold == v), basis, event_type))
        betas.append(tr.null_beta())
    curve = np.full(candidates.size, np.nan)
    rises = 0
    for k, lam in enumerate(candidates):
        loss = 0.0
        for v in range(folds):
            betas[v], _ = _solve(problems[v], float(lam), betas[v], tol, max_sweeps)
            loss += _validation_loss(valids[v], betas[v]) / folds
        curve[k] = loss
        rises = rises + 1 if loss > np.nanmin(curve[:k + 1]) else 0
        if patience is not None and rises >= patience:
            break
    best = int(np.nanargmin(curve))
    path = _fit_path(prob, candidates[:best + 1], tol, max_sweeps)
    cv = {"penalties": candidates.tolist(),
          "loss": [None if np.isnan(x) else float(x) for x in curve],
          "selected": best, "folds": folds}
    return HalModel(basis, path[-1], float(candidates[best]), event_type, 0, cv)
