"""Fitting a complete :class:`~survtmle.tmle.NuisanceSet` from model specifications.

Model strings follow the command-line syntax: event models ``hal``,
``cox:<formula>`` or ``km`` (Nelson-Aalen per arm); censoring models
``cox:<formula>``, ``km`` (Kaplan-Meier per arm) or ``none``; propensity
models ``logistic:<formula>`` or ``fixed:<p>``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset, TimeGrid, uniform_grid
from .formula import FormulaError
from .hal import aggregate, build_basis, cross_validate_bound, fit_l1_poisson, lambda_max
from .hazard import PiecewiseHazard, hazard_from_cox, hazard_from_hal
from .nuisance import (FixedPropensity, NoCensoring, fit_arm_kaplan_meier, fit_cox,
                       fit_logistic_propensity)
from .tmle import NuisanceSet

__all__ = ["EstimatorSpec", "fit_nuisances", "parse_model"]


def parse_model(text: str, allowed: tuple[str, ...]) -> tuple[str, str]:
    """Split ``"kind:argument"``; validates ``kind`` against ``allowed``."""
    kind, _, arg = str(text).partition(":")
    kind = kind.strip().lower()
    if kind not in allowed:
        raise FormulaError(f"model {text!r} must be one of {', '.join(allowed)}")
    return kind, arg.strip()


@dataclass(frozen=True)
class EstimatorSpec:
    """How to estimate each nuisance.

    ``penalty=None`` selects the HAL penalty by cross-validation; ``"max"``
    forces the smallest penalty that zeroes every non-intercept coefficient
    (a constant hazard, i.e. a deliberately misspecified event model).
    ``targeting_intervals`` equal intervals on ``[0, tau]`` are merged into the
    event-model grid to form the grid on which targeting operates.
    """

    event_model: str = "hal"
    censor_model: str = "cox:L3 + L1:A"
    propensity: str = "logistic:1"
    eta: float = 0.01
    grid_size: int = 10
    grid_strategy: str = "quantile"
    knots: int = 8
    knot_strategy: str = "quantile"
    order: int = 2
    folds: int = 5
    penalty: float | str | None = None
    targeting_intervals: int = 60

    def to_dict(self) -> dict:
        return asdict(self)


def _hal_hazards(ds: Dataset, spec: EstimatorSpec, rng, grid_extra: int):
    basis = build_basis(ds, spec.grid_size, spec.knots, min(spec.order, ds.d + 1),
                        spec.knot_strategy, spec.grid_strategy)
    grid = basis.grid.refine(grid_extra) if grid_extra else basis.grid
    hazards, info = [], []
    for j in range(1, ds.J + 1):
        if not np.any(ds.event == j):
            hazards.append(_zero_hazard(ds, grid, j))
            info.append({"penalty": None, "bound": None})
            continue
        if spec.penalty is None:
            model = cross_validate_bound(ds, basis, folds=spec.folds, event_type=j, seed=rng)
        else:
            agg = aggregate(ds, basis, j)
            lam = lambda_max(agg) if spec.penalty == "max" else float(spec.penalty)
            model = fit_l1_poisson(agg, basis, penalty=lam)
        hazards.append(hazard_from_hal(model, ds.covariates, grid))
        info.append({"penalty": model.penalty, "bound": model.bound})
    return hazards, {"hal": info}


def _zero_hazard(ds: Dataset, grid: TimeGrid, j: int, discrete: bool = False) -> PiecewiseHazard:
    """A cause never observed in the sample gets the zero hazard (its MLE)."""
    return PiecewiseHazard(grid, np.zeros((ds.n, 2, grid.n_intervals)), j, discrete, "none")


def _event_grid(ds: Dataset) -> TimeGrid:
    ev = np.unique(ds.time[(ds.event >= 1) & (ds.time < ds.tau)])
    return TimeGrid(np.concatenate([[0.0], ev, [ds.tau]]))


def fit_nuisances(ds: Dataset, spec: EstimatorSpec | None = None,
                  seed: int | np.random.Generator | None = 0,
                  propensity=None, censoring=None) -> NuisanceSet:
    """Fit propensity, censoring and cause-specific event hazards for ``ds``.

    ``propensity`` / ``censoring`` may be given as ready-made evaluators, in
    which case the corresponding specification is ignored.
    """
    spec = spec or EstimatorSpec()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ds.require_events()
    prov: dict = {}

    if propensity is None:
        kind, arg = parse_model(spec.propensity, ("logistic", "fixed"))
        if kind == "fixed":
            propensity = FixedPropensity(float(arg or 0.5))
            prov["propensity"] = "known"
        else:
            propensity = fit_logistic_propensity(ds, arg or "1", eta=spec.eta)
            prov["propensity"] = "logistic"
    else:
        prov["propensity"] = getattr(propensity, "name", "given")

    if censoring is None:
        kind, arg = parse_model(spec.censor_model, ("cox", "km", "none"))
        if kind == "none" or not np.any(ds.event == 0):
            censoring = NoCensoring()
            prov["censoring"] = "none"
        elif kind == "km":
            censoring = fit_arm_kaplan_meier(ds)
            prov["censoring"] = "km"
        else:
            censoring = fit_cox(ds, arg, target="censoring")
            prov["censoring"] = "cox"
            prov["censoring_formula"] = str(censoring.formula)
    else:
        prov["censoring"] = getattr(censoring, "name", "given")

    kind, arg = parse_model(spec.event_model, ("hal", "cox", "km"))
    prov["event"] = kind
    if kind == "hal":
        hazards, info = _hal_hazards(ds, spec, rng, spec.targeting_intervals)
        prov.update(info)
    elif kind == "cox":
        grid = uniform_grid(ds.tau, spec.targeting_intervals)
        hazards = []
        for j in range(1, ds.J + 1):
            if not np.any(ds.event == j):
                hazards.append(_zero_hazard(ds, grid, j))
                continue
            model = fit_cox(ds, arg, target="event", cause=j)
            hazards.append(hazard_from_cox(model, ds.covariates, grid))
            prov.setdefault("event_formula", str(model.formula))
    else:
        grid = _event_grid(ds)
        hazards = []
        for j in range(1, ds.J + 1):
            if not np.any(ds.event == j):
                hazards.append(_zero_hazard(ds, grid, j, discrete=True))
                continue
            per_arm = tuple(fit_cox(ds.subset(ds.treatment == a), "", target="event", cause=j)
                            for a in (0, 1))
            hazards.append(hazard_from_cox(per_arm, ds.covariates, grid, discrete=True))
    return NuisanceSet(propensity, censoring, tuple(hazards), spec.eta, prov)
