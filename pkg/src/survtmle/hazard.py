"""Piecewise-constant conditional hazards evaluated for every subject and arm."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import TimeGrid
from .hal import HalModel
from .nuisance import CoxModel

__all__ = ["PiecewiseHazard", "hazard_from_cox", "hazard_from_hal", "refinement_index"]


@dataclass(frozen=True, eq=False)
class PiecewiseHazard:
    """Hazard ``lambda_j(t | a, L_i)`` on a time grid for each subject ``i`` and arm ``a``.

    Parameters
    ----------
    grid : TimeGrid
        ``K`` intervals on ``[0, tau]``.
    values : array of shape (n, 2, K)
        Constant hazard rate on each interval. With ``discrete=True`` the
        values are instead hazard jumps placed at the interval right endpoints
        (product-limit survival); this represents step-function cumulative
        hazards such as Breslow/Nelson-Aalen estimates exactly.
    event_type : int
        Cause ``j`` the hazard belongs to.
    """

    grid: TimeGrid
    values: np.ndarray
    event_type: int = 1
    discrete: bool = False
    source: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[1] != 2 or v.shape[2] != self.grid.n_intervals:
            raise ValueError("values must have shape (n, 2, K)")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("hazard values must be finite and nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def increments(self) -> np.ndarray:
        """Cumulative-hazard increments per interval, shape (n, 2, K)."""
        return self.values if self.discrete else self.values * self.grid.widths

    def cumulative(self) -> np.ndarray:
        """``Lambda(t_k | a, L_i)`` at the grid points, shape (n, 2, K + 1)."""
        inc = self.increments()
        return np.concatenate([np.zeros(inc.shape[:2] + (1,)), np.cumsum(inc, axis=2)], axis=2)

    def survival(self) -> np.ndarray:
        """``S(t_k | a, L_i)`` at the grid points for this single cause."""
        if self.discrete:
            inc = np.clip(self.values, 0.0, 1.0)
            return np.concatenate([np.ones(inc.shape[:2] + (1,)),
                                   np.cumprod(1.0 - inc, axis=2)], axis=2)
        return np.exp(-self.cumulative())

    def with_values(self, values: np.ndarray) -> "PiecewiseHazard":
        return replace(self, values=values)

    def update(self, epsilon: float, covariate: np.ndarray) -> "PiecewiseHazard":
        """Multiplicative fluctuation ``lambda * exp(epsilon * w * h)``.

        ``covariate`` holds ``w * h`` with shape (n, 2, K).
        """
        if epsilon == 0.0:
            return self
        return self.with_values(self.values * np.exp(np.clip(epsilon * covariate, -700, 700)))

    def refine(self, grid: TimeGrid) -> "PiecewiseHazard":
        """Re-express the hazard on a finer grid containing every current grid point."""
        idx = refinement_index(self.grid, grid)
        if self.discrete:
            values = np.zeros((self.n, 2, grid.n_intervals))
            ends = np.searchsorted(grid.right, self.grid.right)
            values[:, :, ends] = self.values
        else:
            values = self.values[:, :, idx]
        return replace(self, grid=grid, values=values)


def refinement_index(coarse: TimeGrid, fine: TimeGrid) -> np.ndarray:
    """For each interval of ``fine``, the interval of ``coarse`` that contains it."""
    pos = np.searchsorted(fine.points, coarse.points)
    pos = np.minimum(pos, fine.points.size - 1)
    if not np.allclose(fine.points[pos], coarse.points, rtol=0, atol=1e-12 * fine.tau):
        raise ValueError("the new grid must contain every point of the current grid")
    mid = 0.5 * (fine.left + fine.right)
    return np.clip(np.searchsorted(coarse.points, mid) - 1, 0, coarse.n_intervals - 1)


def hazard_from_hal(model: HalModel, covariates, grid: TimeGrid | None = None) -> PiecewiseHazard:
    """Evaluate ``exp(f_beta(t, a, L_i))`` for both arms on the model grid (optionally refined)."""
    cov = np.asarray(covariates, dtype=float)
    values = np.stack([model.hazard(a, cov) for a in (0, 1)], axis=1)
    hz = PiecewiseHazard(model.basis.grid, values, model.event_type, False, "hal")
    return hz if grid is None else hz.refine(grid)


def hazard_from_cox(model: CoxModel | tuple[CoxModel, CoxModel], covariates, grid: TimeGrid,
                    discrete: bool = False) -> PiecewiseHazard:
    """Piecewise representation of a Cox model (or one model per arm).

    The cumulative hazard is matched exactly at the grid points; in the
    continuous representation it is interpolated linearly in between.
    """
    cov = np.asarray(covariates, dtype=float)
    models = model if isinstance(model, tuple) else (model, model)
    values = np.empty((cov.shape[0], 2, grid.n_intervals))
    for a in (0, 1):
        m = models[a]
        base = m.baseline(grid.points)
        inc = np.diff(base)
        risk = np.exp(m.linear_predictor(a, cov))
        values[:, a, :] = risk[:, None] * (inc if discrete else inc / grid.widths)[None, :]
    j = models[0].cause if models[0].target == "event" else 1
    return PiecewiseHazard(grid, values, j, discrete, "cox")
