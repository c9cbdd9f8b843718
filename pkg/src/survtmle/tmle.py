"""Targeting of conditional hazards and the resulting plug-in risk estimators.

For an intervention with coefficients ``c(a, L)`` (``pi*(a | L)`` for a
static or stochastic regime, ``+1/-1`` for the treatment contrast) the target
is ``psi = E[sum_a c(a, L) F_1(tau | a, L)]``. Its efficient influence
function is

    D*(O) = sum_j int_0^tau w_t h_{j,t} (N_j(dt) - Lambda_j(dt | A, L))
            + sum_a c(a, L) F_1(tau | a, L) - psi

with clever weight ``w_t = 1{T~ >= t} c(A, L) / (pi(A | L) S^c(t- | A, L))``
and clever covariates ``h_1 = 1 - (F_1(tau) - F_1(t)) / S(t)`` and
``h_j = -(F_1(tau) - F_1(t)) / S(t)`` for the competing causes ``j >= 2``
(for a single cause ``h_1 = S(tau) / S(t)``). Targeting multiplies each
cause-specific hazard by ``exp(epsilon_j w h_j)`` until the empirical mean of
``D*`` is below ``s_n = sigma_n / (sqrt(n) log n)``.

Throughout, ``w`` and ``h`` are held constant within each interval of the
targeting grid and evaluated at the interval midpoint (``eval_point="left"``
uses left endpoints).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm

from .data import CountingView, Dataset, TimeGrid
from .hazard import PiecewiseHazard

__all__ = [
    "EstimateReport",
    "HazardBlowUpError",
    "Intervention",
    "NuisanceFunctions",
    "NuisanceSet",
    "TargetingConfig",
    "TargetingError",
    "TargetingState",
    "cause_scores",
    "clever_covariate",
    "clever_weight",
    "compute_absolute_risk",
    "cumulative_incidences",
    "eif_evaluate",
    "estimate",
    "fluctuation_loglik",
    "one_step_targeting",
    "remainder_diagnostic",
    "run_targeting",
    "solve_epsilon",
    "stopping_threshold",
    "targeted_estimate",
    "update_hazard",
]

log = logging.getLogger(__name__)

Z_975 = 1.959964


class TargetingError(RuntimeError):
    code = "tmle.targeting"

    def __init__(self, message: str, state: "TargetingState | None" = None):
        super().__init__(message)
        self.state = state


class HazardBlowUpError(TargetingError):
    code = "tmle.hazard_blowup"


# ----------------------------------------------------------------- inputs

@dataclass(frozen=True)
class Intervention:
    """Target intervention.

    ``kind`` is ``"fixed"`` (all mass on ``arm``), ``"stochastic"`` (treatment
    probabilities ``pi_star(L) -> P*(A = 1 | L)``) or ``"ate"`` (risk
    difference, arm 1 minus arm 0).
    """

    kind: str = "fixed"
    arm: int = 1
    pi_star: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("fixed", "stochastic", "ate"):
            raise ValueError(f"unknown intervention kind {self.kind!r}")
        if self.kind == "fixed" and self.arm not in (0, 1):
            raise ValueError("arm must be 0 or 1")
        if self.kind == "stochastic" and self.pi_star is None:
            raise ValueError("stochastic intervention needs pi_star")

    @classmethod
    def fixed(cls, arm: int) -> "Intervention":
        return cls("fixed", arm)

    @classmethod
    def ate(cls) -> "Intervention":
        return cls("ate")

    @classmethod
    def stochastic(cls, pi_star) -> "Intervention":
        return cls("stochastic", 1, pi_star)

    def coefficients(self, covariates) -> np.ndarray:
        """``c(a, L_i)``, shape (n, 2)."""
        n = np.atleast_2d(np.asarray(covariates)).shape[0]
        if self.kind == "fixed":
            out = np.zeros((n, 2))
            out[:, self.arm] = 1.0
            return out
        if self.kind == "ate":
            return np.tile([-1.0, 1.0], (n, 1))
        p1 = np.broadcast_to(np.asarray(self.pi_star(np.asarray(covariates)), dtype=float), (n,))
        if np.any((p1 < 0) | (p1 > 1)):
            raise ValueError("pi_star must return probabilities")
        return np.column_stack([1.0 - p1, p1])

    def describe(self) -> str:
        return {"fixed": f"arm{self.arm}", "ate": "ate", "stochastic": "stochastic"}[self.kind]


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    """Initial (or targeted) nuisance estimates for one dataset.

    ``propensity`` must provide ``predict(a, L) -> pi(a | L)``;
    ``censoring`` must provide ``survival_left(times, a, L) -> S^c(t- | a, L)``
    of shape (n, len(times)); ``event_hazards[j - 1]`` is the hazard of cause
    ``j`` on the common targeting grid. Propensities and censoring survival
    probabilities are truncated below at ``eta``.
    """

    propensity: object
    censoring: object
    event_hazards: tuple[PiecewiseHazard, ...]
    eta: float = 0.01
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        hz = tuple(self.event_hazards)
        if not hz:
            raise ValueError("at least one event hazard is required")
        g = hz[0].grid
        for h in hz[1:]:
            if h.grid.points.shape != g.points.shape or not np.allclose(h.grid.points, g.points):
                raise ValueError("all event hazards must share one grid")
            if h.discrete != hz[0].discrete or h.n != hz[0].n:
                raise ValueError("event hazards must agree in representation and size")
        object.__setattr__(self, "event_hazards", hz)

    @property
    def grid(self) -> TimeGrid:
        return self.event_hazards[0].grid

    @property
    def J(self) -> int:
        return len(self.event_hazards)

    @property
    def discrete(self) -> bool:
        return self.event_hazards[0].discrete

    def with_hazards(self, hazards: Sequence[PiecewiseHazard]) -> "NuisanceSet":
        return NuisanceSet(self.propensity, self.censoring, tuple(hazards), self.eta,
                           self.provenance)


@dataclass
class TargetingConfig:
    """Settings of the targeting step."""

    max_iter: int = 50
    eval_point: str = "mid"
    stopping: str = "conventional"
    cause_order: tuple[int, ...] | None = None
    oscillation_window: int = 3
    survival_floor: float = 1e-12
    step: float = 1e-3
    max_steps: int = 100_000
    epsilon_bracket: float = 10.0

    def __post_init__(self):
        if self.eval_point not in ("mid", "left"):
            raise ValueError("eval_point must be 'mid' or 'left'")
        if self.stopping not in ("conventional", "literal"):
            raise ValueError("stopping must be 'conventional' or 'literal'")


@dataclass
class TargetingState:
    """Trace of a targeting run."""

    iterations: int = 0
    epsilons: list[list[float]] = field(default_factory=list)
    scores: list[list[float]] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)
    thresholds: list[float] = field(default_factory=list)
    stop_reason: str = ""
    steps: int = 0
    reversals: int = 0

    @property
    def residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("nan")

    @property
    def s_n(self) -> float:
        return self.thresholds[-1] if self.thresholds else float("nan")

    @property
    def converged(self) -> bool:
        return self.stop_reason == "converged"


@dataclass
class EstimateReport:
    """Targeted estimate with influence-function based inference."""

    psi_hat: float
    se: float
    ci: tuple[float, float]
    alpha: float
    n: int
    target: str
    psi_initial: float
    eic_residual: float
    s_n: float
    targeting: TargetingState
    nuisance: dict
    eif: np.ndarray | None = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return self.targeting.iterations

    def to_dict(self) -> dict:
        return {
            "psi_hat": self.psi_hat,
            "se": self.se,
            "ci": list(self.ci),
            "alpha": self.alpha,
            "n": self.n,
            "target": self.target,
            "psi_initial": self.psi_initial,
            "iterations": self.targeting.iterations,
            "steps": self.targeting.steps,
            "eic_residual": self.eic_residual,
            "s_n": self.s_n,
            "stop_reason": self.targeting.stop_reason,
            "trace": {"residuals": self.targeting.residuals,
                      "thresholds": self.targeting.thresholds,
                      "epsilons": self.targeting.epsilons},
            "nuisance": self.nuisance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self) -> str:
        lo, hi = self.ci
        level = round(100 * (1 - self.alpha))
        return (f"target {self.target}: psi = {self.psi_hat:.6f} (se {self.se:.6f}); "
                f"{level}% CI [{lo:.6f}, {hi:.6f}]; n = {self.n}; "
                f"{self.targeting.iterations} targeting iterations, "
                f"|P_n D*| = {self.eic_residual:.3g} (threshold {self.s_n:.3g}, "
                f"{self.targeting.stop_reason})")


# --------------------------------------------------------------- workspace

def _risk_path(hazards: Sequence[PiecewiseHazard], frac: np.ndarray | None):
    """Survival and cause-1 risk at grid points and at evaluation points.

    Returns ``S`` and ``F1`` of shape (n, 2, K + 1) and ``S_eval``, ``F1_eval``
    of shape (n, 2, K). ``frac`` is the relative position of the evaluation
    point in each interval (continuous representation only).
    """
    lam1 = hazards[0].values
    tot = lam1 if len(hazards) == 1 else np.sum([h.values for h in hazards], axis=0)
    n, _, K = tot.shape
    if hazards[0].discrete:
        tot_c = np.minimum(tot, 1.0)
        scale = np.divide(tot_c, tot, out=np.ones_like(tot), where=tot > 0)
        S = np.concatenate([np.ones((n, 2, 1)), np.cumprod(1.0 - tot_c, axis=2)], axis=2)
        inc = S[:, :, :-1] * lam1 * scale
        F1 = np.concatenate([np.zeros((n, 2, 1)), np.cumsum(inc, axis=2)], axis=2)
        return S, F1, S[:, :, 1:], F1[:, :, 1:]
    widths = hazards[0].grid.widths
    Ltot = tot * widths
    S = np.concatenate([np.ones((n, 2, 1)), np.exp(-np.cumsum(Ltot, axis=2))], axis=2)
    share = np.divide(lam1, tot, out=np.zeros_like(tot), where=tot > 0)
    inc = S[:, :, :-1] * share * -np.expm1(-Ltot)
    F1 = np.concatenate([np.zeros((n, 2, 1)), np.cumsum(inc, axis=2)], axis=2)
    part = Ltot * frac
    S_eval = S[:, :, :-1] * np.exp(-part)
    F1_eval = F1[:, :, :-1] + S[:, :, :-1] * share * -np.expm1(-part)
    return S, F1, S_eval, F1_eval


class _Workspace:
    """Fixed quantities of a targeting problem (weights, counting processes)."""

    def __init__(self, ds: Dataset, nuis: NuisanceSet, iv: Intervention, cfg: TargetingConfig):
        grid = nuis.grid
        if abs(grid.tau - ds.tau) > 1e-9 * ds.tau:
            raise ValueError("targeting grid must end at the dataset's tau")
        if nuis.event_hazards[0].n != ds.n:
            raise ValueError("hazards were evaluated for a different sample")
        if nuis.J != ds.J:
            raise ValueError(f"dataset has {ds.J} event types but {nuis.J} hazards were given")
        ds.require_events()
        self.ds, self.nuis, self.iv, self.cfg = ds, nuis, iv, cfg
        self.n, self.K, self.J = ds.n, grid.n_intervals, nuis.J
        self.discrete = nuis.discrete
        view = CountingView.build(ds, grid)
        self.dN = view.dN
        self.x = view.at_risk_end if self.discrete else view.exposure * grid.widths
        self.A = ds.treatment
        self.rows = np.arange(ds.n)
        self.frac = np.full(self.K, 0.5 if cfg.eval_point == "mid" else 0.0)
        if self.discrete:
            t_eval = grid.right
        else:
            t_eval = grid.left + self.frac * grid.widths
        self.t_eval = t_eval
        self.c = iv.coefficients(ds.covariates)
        self.W = clever_weights_all(ds, nuis, iv, t_eval)

    def observed(self, arr: np.ndarray) -> np.ndarray:
        """Select the observed arm: (n, 2, K) -> (n, K)."""
        return arr[self.rows, self.A, :]

    def covariates(self, hazards):
        S, F1, S_eval, F1_eval = _risk_path(hazards, self.frac)
        remaining = F1[:, :, -1:] - F1_eval
        bad = (S_eval < self.cfg.survival_floor) & (np.abs(remaining) > 0)
        if np.any(bad):
            raise HazardBlowUpError(
                f"survival fell below {self.cfg.survival_floor} where risk remains; "
                "the hazard has blown up")
        ratio = np.divide(remaining, S_eval, out=np.zeros_like(remaining), where=~bad & (S_eval > 0))
        H = [1.0 - ratio] + [-ratio] * (self.J - 1)
        return S, F1, H

    def evaluate(self, hazards):
        """Cause-specific scores, EIF and the pieces needed for updating."""
        S, F1, H = self.covariates(hazards)
        Wo = self.observed(self.W)
        mart = np.zeros(self.n)
        scores = np.empty(self.J)
        for j in range(self.J):
            g = Wo * self.observed(H[j])
            lam = self.observed(hazards[j].values)
            m = np.sum(g * (self.dN[j] - lam * self.x), axis=1)
            scores[j] = m.mean()
            mart += m
        plug = np.sum(self.c * F1[:, :, -1], axis=1)
        psi = float(plug.mean())
        eif = mart + plug - psi
        return _Eval(psi, eif, scores, H, S, F1)

    def threshold(self, eif: np.ndarray) -> float:
        return stopping_threshold(eif, self.cfg.stopping)


@dataclass
class _Eval:
    psi: float
    eif: np.ndarray
    scores: np.ndarray
    H: list
    S: np.ndarray
    F1: np.ndarray

    @property
    def residual(self) -> float:
        return abs(float(self.eif.mean()))


def stopping_threshold(eif: np.ndarray, rule: str = "conventional") -> float:
    """``s_n = sigma_n / (sqrt(n) log n)``; ``rule="literal"`` uses ``sigma_n sqrt(n) / log n``."""
    n = eif.size
    sigma = math.sqrt(float(np.mean(eif**2)))
    if rule == "literal":
        return sigma * math.sqrt(n) / math.log(n)
    return sigma / (math.sqrt(n) * math.log(n))


# ---------------------------------------------------------- public pieces

def clever_weights_all(ds: Dataset, nuis: NuisanceSet, iv: Intervention, times) -> np.ndarray:
    """``c(a, L) / (pi(a | L) S^c(t- | a, L))`` for both arms, shape (n, 2, len(times)).

    The at-risk indicator is not included.
    """
    times = np.asarray(times, dtype=float)
    c = iv.coefficients(ds.covariates)
    out = np.empty((ds.n, 2, times.size))
    for a in (0, 1):
        pi = np.maximum(nuis.propensity.predict(a, ds.covariates), nuis.eta)
        sc = np.maximum(nuis.censoring.survival_left(times, a, ds.covariates), nuis.eta)
        out[:, a, :] = c[:, a, None] / (pi[:, None] * sc)
    return out


def clever_weight(t: float, i: int, ds: Dataset, nuis: NuisanceSet, iv: Intervention) -> float:
    """Clever weight ``w_t`` of subject ``i`` at time ``t`` (zero once out of the risk set)."""
    if not 0 < t <= ds.tau:
        return 0.0
    if ds.time[i] < t:
        return 0.0
    sub = ds.subset([i])
    one = NuisanceSet(nuis.propensity, nuis.censoring, nuis.event_hazards, nuis.eta)
    W = clever_weights_all(sub, one, iv, [t])
    return float(W[0, ds.treatment[i], 0])


def compute_absolute_risk(hazards: Sequence[PiecewiseHazard], t: float, a: int,
                          i: int | None = None) -> np.ndarray | float:
    """``F_1(t | a, L_i)``, exact for piecewise-constant (or jump) hazards.

    Returns the value for subject ``i`` or, with ``i=None``, for all subjects.
    """
    grid = hazards[0].grid
    if not 0 <= t <= grid.tau + 1e-12:
        raise ValueError("t must lie in [0, tau]")
    k = int(np.searchsorted(grid.points, t, side="right") - 1)
    k = min(k, grid.n_intervals)
    S, F1, _, _ = _risk_path(hazards, np.zeros(grid.n_intervals))
    if k == grid.n_intervals or t == grid.points[k] or hazards[0].discrete:
        out = F1[:, a, k]
    else:
        lam1 = hazards[0].values[:, a, k]
        tot = np.sum([h.values[:, a, k] for h in hazards], axis=0)
        part = tot * (t - grid.points[k])
        share = np.divide(lam1, tot, out=np.zeros_like(tot), where=tot > 0)
        out = F1[:, a, k] + S[:, a, k] * share * -np.expm1(-part)
    return out if i is None else float(out[i])


def clever_covariate(t: float, i: int, hazards: Sequence[PiecewiseHazard], j: int = 1,
                     a: int = 0, floor: float = 1e-12) -> float:
    """Clever covariate ``h_{j,t}`` of subject ``i`` evaluated under arm ``a``.

    Pass the subject's observed treatment as ``a`` to obtain ``h_t(O_i)``. For
    a single cause this is ``S(tau) / S(t)``; for discrete hazards ``S(t)``
    includes the jump at ``t``.
    """
    grid = hazards[0].grid
    arm = a
    F1t = compute_absolute_risk(hazards, t, arm, i)
    F1tau = compute_absolute_risk(hazards, grid.tau, arm, i)
    tot = PiecewiseHazard(grid, np.sum([h.values for h in hazards], axis=0), 1,
                          hazards[0].discrete)
    if tot.discrete:
        St = float(tot.survival()[i, arm, np.searchsorted(grid.right, t, side="right")])
    else:
        k = int(min(np.searchsorted(grid.points, t, side="right") - 1, grid.n_intervals - 1))
        Lk = tot.cumulative()[i, arm, k]
        St = math.exp(-(Lk + tot.values[i, arm, k] * (t - grid.points[k])))
    rem = F1tau - F1t
    if rem == 0:
        return 1.0 if j == 1 else 0.0
    if St < floor:
        raise HazardBlowUpError(f"S(t) = {St:.3g} below floor {floor}")
    return (1.0 if j == 1 else 0.0) - rem / St


def cause_scores(ds: Dataset, nuis: NuisanceSet, iv: Intervention,
                 config: TargetingConfig | None = None) -> np.ndarray:
    """Empirical means ``P_n D*_j`` of the cause-specific EIF components, shape (J,)."""
    ws = _Workspace(ds, nuis, iv, config or TargetingConfig())
    return ws.evaluate(nuis.event_hazards).scores


def cumulative_incidences(hazards: Sequence[PiecewiseHazard]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Overall survival and every cause's absolute risk at the grid points.

    Returns ``S`` of shape (n, 2, K + 1) and a list with ``F_j`` of the same
    shape for ``j = 1..J``.
    """
    K = hazards[0].grid.n_intervals
    F = []
    for j in range(len(hazards)):
        order = [hazards[j]] + [h for m, h in enumerate(hazards) if m != j]
        S, Fj, _, _ = _risk_path(order, np.zeros(K))
        F.append(Fj)
    return S, F


def eif_evaluate(ds: Dataset, nuis: NuisanceSet, iv: Intervention, psi: float | None = None,
                 config: TargetingConfig | None = None) -> np.ndarray:
    """Efficient influence function values ``D*(O_i)`` for all subjects.

    With ``psi=None`` the plug-in value of the current fit is used.
    """
    ws = _Workspace(ds, nuis, iv, config or TargetingConfig())
    ev = ws.evaluate(nuis.event_hazards)
    if psi is None:
        return ev.eif
    return ev.eif + ev.psi - psi


def solve_epsilon(g_event: np.ndarray, g_comp: np.ndarray, g: np.ndarray,
                  bracket: float = 10.0, tol: float = 1e-12) -> float:
    """Root of ``U(eps) = sum g_event - sum g_comp * exp(eps * g)``.

    ``g_event = w h dN``, ``g_comp = w h lambda x`` (compensator) and
    ``g = w h`` are arrays of equal shape. ``U`` is nonincreasing; the root is
    found by Newton's method safeguarded by bisection on
    ``[-bracket, bracket]``.
    """
    a = float(np.sum(g_event))
    scale = max(1.0, abs(a), float(np.sum(np.abs(g_comp))))

    def U(eps):
        e = np.exp(np.clip(eps * g, -700, 700))
        return a - float(np.sum(g_comp * e)), -float(np.sum(g_comp * g * e))

    u0, d0 = U(0.0)
    if abs(u0) <= tol * scale:
        return 0.0
    lo, hi = -bracket, bracket
    ulo, uhi = U(lo)[0], U(hi)[0]
    if ulo < 0 or uhi > 0:
        raise TargetingError(
            f"score has no sign change on [-{bracket}, {bracket}] "
            f"(U(-)={ulo:.3g}, U(+)={uhi:.3g}); weights may be pathological")
    eps, u, d = 0.0, u0, d0
    for _ in range(200):
        if u > 0:
            lo = eps
        else:
            hi = eps
        step_ok = d < 0
        new = eps - u / d if step_ok else 0.5 * (lo + hi)
        if not (lo < new < hi):
            new = 0.5 * (lo + hi)
        eps = new
        u, d = U(eps)
        if abs(u) <= tol * scale or hi - lo < 1e-15:
            return eps
    return eps


def update_hazard(hazard: PiecewiseHazard, epsilon: float, covariate: np.ndarray) -> PiecewiseHazard:
    """Apply ``lambda exp(epsilon w h)``; ``covariate`` holds ``w h`` as (n, 2, K)."""
    return hazard.update(epsilon, covariate)


def fluctuation_loglik(ds: Dataset, nuis: NuisanceSet, iv: Intervention, epsilon: float,
                       cause: int = 1, config: TargetingConfig | None = None) -> float:
    """Empirical log-likelihood (per subject) of cause ``cause`` along the fluctuation.

    Uses the piecewise-constant likelihood ``sum_k dN log(lambda) - lambda x``
    with the clever covariate evaluated at the initial fit.
    """
    ws = _Workspace(ds, nuis, iv, config or TargetingConfig())
    _, _, H = ws.covariates(nuis.event_hazards)
    g = ws.W * H[cause - 1]
    lam = ws.observed(update_hazard(nuis.event_hazards[cause - 1], epsilon, g).values)
    dN = ws.dN[cause - 1]
    with np.errstate(divide="ignore"):
        logl = np.where(dN > 0, np.log(lam), 0.0)
    return float(np.sum(dN * logl - lam * ws.x)) / ds.n


# -------------------------------------------------------------- targeting

def _record(state: TargetingState, ev: _Eval, s_n: float, eps=None):
    state.residuals.append(ev.residual)
    state.thresholds.append(s_n)
    state.scores.append([float(v) for v in ev.scores])
    if eps is not None:
        state.epsilons.append([float(e) for e in eps])


def _check_oscillation(state: TargetingState, window: int):
    r = state.residuals
    if len(r) > window and all(r[-k] > r[-k - 1] for k in range(1, window + 1)):
        raise TargetingError(
            f"targeting oscillates: EIC residual increased {window} sweeps in a row "
            f"(trace {r})", state)


def run_targeting(ds: Dataset, nuis: NuisanceSet, iv: Intervention,
                  config: TargetingConfig | None = None) -> tuple[NuisanceSet, TargetingState]:
    """Iterative targeting: solve the score equation in ``epsilon`` and update until
    ``|P_n D*| <= s_n`` (one ``epsilon`` per cause per sweep)."""
    cfg = config or TargetingConfig()
    ws = _Workspace(ds, nuis, iv, cfg)
    hazards = list(nuis.event_hazards)
    order = [j - 1 for j in (cfg.cause_order or range(1, ws.J + 1))]
    state = TargetingState()
    ev = ws.evaluate(hazards)
    s_n = ws.threshold(ev.eif)
    _record(state, ev, s_n)
    while True:
        if ev.residual <= s_n:
            state.stop_reason = "converged"
            break
        if state.iterations >= cfg.max_iter:
            state.stop_reason = "max_iterations"
            log.warning("targeting stopped after %d sweeps with residual %.3g > %.3g",
                        state.iterations, ev.residual, s_n)
            break
        eps_k = [0.0] * ws.J
        H = ev.H
        for pos, j in enumerate(order):
            if pos > 0:
                _, _, H = ws.covariates(hazards)
            G = ws.W * H[j]
            go = ws.observed(G)
            lam = ws.observed(hazards[j].values)
            eps = solve_epsilon(go * ws.dN[j], go * lam * ws.x, go, cfg.epsilon_bracket)
            hazards[j] = update_hazard(hazards[j], eps, G)
            eps_k[j] = eps
        state.iterations += 1
        ev = ws.evaluate(hazards)
        s_n = ws.threshold(ev.eif)
        _record(state, ev, s_n, eps_k)
        _check_oscillation(state, cfg.oscillation_window)
    return nuis.with_hazards(hazards), state


def one_step_targeting(ds: Dataset, nuis: NuisanceSet, iv: Intervention,
                       step: float | None = None,
                       config: TargetingConfig | None = None) -> tuple[NuisanceSet, TargetingState]:
    """Follow the locally least favourable path in small steps ``d epsilon``.

    Each micro-step multiplies the hazards by ``exp(d eps u_j w h_j)`` where
    ``u`` is the normalised score vector, recomputing ``h`` afterwards. If the
    score changes direction the step is halved and reversed.
    """
    cfg = config or TargetingConfig()
    deps = cfg.step if step is None else float(step)
    if deps <= 0:
        raise ValueError("step size must be positive")
    ws = _Workspace(ds, nuis, iv, cfg)
    hazards = list(nuis.event_hazards)
    state = TargetingState()
    ev = ws.evaluate(hazards)
    s_n = ws.threshold(ev.eif)
    _record(state, ev, s_n)
    total = np.zeros(ws.J)
    while ev.residual > s_n:
        if state.steps >= cfg.max_steps:
            raise TargetingError(f"one-step targeting exhausted {cfg.max_steps} micro-steps",
                                 state)
        u = ev.scores / np.linalg.norm(ev.scores)
        for j in range(ws.J):
            hazards[j] = update_hazard(hazards[j], deps * u[j], ws.W * ev.H[j])
        total += deps * u
        state.steps += 1
        new = ws.evaluate(hazards)
        if float(new.scores @ u) < 0:
            deps /= 2
            state.reversals += 1
        ev = new
        s_n = ws.threshold(ev.eif)
        state.residuals.append(ev.residual)
        state.thresholds.append(s_n)
    state.epsilons.append([float(e) for e in total])
    state.scores.append([float(v) for v in ev.scores])
    state.iterations = state.steps
    state.stop_reason = "converged"
    return nuis.with_hazards(hazards), state


def estimate(ds: Dataset, nuis_targeted: NuisanceSet, iv: Intervention, alpha: float = 0.05,
             state: TargetingState | None = None, psi_initial: float | None = None,
             config: TargetingConfig | None = None) -> EstimateReport:
    """Plug-in estimate from (targeted) hazards with a Wald interval from the EIF."""
    cfg = config or TargetingConfig()
    ws = _Workspace(ds, nuis_targeted, iv, cfg)
    ev = ws.evaluate(nuis_targeted.event_hazards)
    n = ds.n
    sigma = math.sqrt(float(np.mean(ev.eif**2)))
    se = sigma / math.sqrt(n)
    z = Z_975 if alpha == 0.05 else float(norm.ppf(1 - alpha / 2))
    state = state or TargetingState(stop_reason="not_targeted")
    return EstimateReport(
        psi_hat=ev.psi, se=se, ci=(ev.psi - z * se, ev.psi + z * se), alpha=alpha, n=n,
        target=iv.describe(), psi_initial=ev.psi if psi_initial is None else psi_initial,
        eic_residual=ev.residual, s_n=ws.threshold(ev.eif), targeting=state,
        nuisance=dict(nuis_targeted.provenance), eif=ev.eif)


def targeted_estimate(ds: Dataset, nuis: NuisanceSet, iv: Intervention, mode: str = "iterative",
                      alpha: float = 0.05,
                      config: TargetingConfig | None = None) -> EstimateReport:
    """Run targeting (``"iterative"`` or ``"one_step"``) and return the final report."""
    cfg = config or TargetingConfig()
    psi0 = _Workspace(ds, nuis, iv, cfg).evaluate(nuis.event_hazards).psi
    if mode == "iterative":
        fitted, state = run_targeting(ds, nuis, iv, cfg)
    elif mode in ("one_step", "one-step"):
        fitted, state = one_step_targeting(ds, nuis, iv, config=cfg)
    else:
        raise ValueError(f"unknown targeting mode {mode!r}")
    return estimate(ds, fitted, iv, alpha, state, psi0, cfg)


# ------------------------------------------------------------ diagnostics

class NuisanceFunctions:
    """Function-style view ``(t, a) -> values for every subject`` of a NuisanceSet."""

    def __init__(self, ds: Dataset, nuis: NuisanceSet):
        if nuis.J != 1 or nuis.discrete:
            raise ValueError("remainder diagnostic supports single-cause continuous hazards")
        self.ds, self.nuis = ds, nuis
        self.hz = nuis.event_hazards[0]
        self.L = self.hz.cumulative()

    def propensity(self, a, L):
        return np.maximum(self.nuis.propensity.predict(a, L), self.nuis.eta)

    def censoring_survival(self, t, a, L):
        return np.maximum(self.nuis.censoring.survival_left(np.atleast_1d(t), a, L)[:, 0],
                          self.nuis.eta)

    def _k(self, t):
        g = self.hz.grid
        return int(min(max(np.searchsorted(g.points, t, side="right") - 1, 0), g.n_intervals - 1))

    def hazard(self, t, a, L):
        return self.hz.values[:, a, self._k(t)]

    def survival(self, t, a, L):
        k = self._k(t)
        g = self.hz.grid
        return np.exp(-(self.L[:, a, k] + self.hz.values[:, a, k] * (t - g.points[k])))


def remainder_diagnostic(truth, fitted, ds: Dataset, iv: Intervention,
                         grid: TimeGrid | None = None, nodes: int = 8) -> float:
    """Exact second-order remainder ``R(P, P0)`` averaged over the sample's covariates.

    ``truth`` and ``fitted`` expose ``propensity(a, L)``,
    ``censoring_survival(t, a, L)`` (left limit), ``hazard(t, a, L)`` and
    ``survival(t, a, L)`` returning one value per covariate row; a fitted
    :class:`NuisanceSet` is adapted automatically. The time integral uses
    Gauss-Legendre quadrature on each interval of ``grid``.
    """
    if isinstance(fitted, NuisanceSet):
        grid = grid or fitted.grid
        fitted = NuisanceFunctions(ds, fitted)
    if grid is None:
        raise ValueError("a grid is required for function-style fitted nuisances")
    L = ds.covariates
    c = iv.coefficients(L)
    x, w = np.polynomial.legendre.leggauss(nodes)
    total = np.zeros(ds.n)
    for a in (0, 1):
        if not np.any(c[:, a]):
            continue
        S_tau = fitted.survival(grid.tau, a, L)
        G = fitted.propensity(a, L)
        G0 = truth.propensity(a, L)
        acc = np.zeros(ds.n)
        for lo, hi in zip(grid.left, grid.right):
            for xi, wi in zip(x, w):
                t = lo + (hi - lo) * (xi + 1) / 2
                g_fit = G * fitted.censoring_survival(t, a, L)
                g_true = G0 * truth.censoring_survival(t, a, L)
                d_lam = truth.hazard(t, a, L) - fitted.hazard(t, a, L)
                acc += wi * (hi - lo) / 2 * ((g_true - g_fit) / g_fit * truth.survival(t, a, L)
                                            * d_lam / fitted.survival(t, a, L))
        total += c[:, a] * S_tau * acc
    return float(total.mean())
