"""Right-censored and competing-risks event data.

A :class:`Dataset` holds one row per subject ``(L, A, T~, event)`` where the
event code is 0 for a censored follow-up and ``1..J`` for the observed event
type. Arrays are stored column-wise and frozen after construction.
"""

from __future__ import annotations

import csv
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "CountingView",
    "DataError",
    "Dataset",
    "ObservedRecord",
    "ParseError",
    "TimeGrid",
    "ValidationError",
    "counting_process",
    "event_sequence",
    "event_time_grid",
    "load_csv",
    "risk_set_size",
    "uniform_grid",
    "write_csv",
]


class DataError(ValueError):
    """Base class for problems with input data."""

    code = "data.invalid"


class ParseError(DataError):
    code = "data.parse"


class ValidationError(DataError):
    code = "data.validation"

    def __init__(self, message: str, rows: Sequence[int] = ()):
        super().__init__(message)
        self.rows = list(rows)


@dataclass(frozen=True)
class ObservedRecord:
    """One subject: covariates ``L``, treatment ``A``, time ``T~`` and event code."""

    covariates: tuple[float, ...]
    treatment: int
    time: float
    event_type: int


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated, immutable sample of observed records.

    Parameters
    ----------
    time : array of shape (n,)
        Observed follow-up times, strictly positive and finite.
    event : array of shape (n,)
        Event codes in ``{0, ..., J}``; 0 means censored.
    treatment : array of shape (n,)
        Binary baseline treatment.
    covariates : array of shape (n, d)
        Baseline covariates. ``d`` may be zero.
    tau : float
        Time horizon of interest.
    J : int, optional
        Number of event types. Defaults to ``max(1, max(event))``.
    """

    time: np.ndarray
    event: np.ndarray
    treatment: np.ndarray
    covariates: np.ndarray
    tau: float
    J: int = 0
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        time = np.asarray(self.time, dtype=float).reshape(-1)
        n = time.shape[0]
        event = np.asarray(self.event)
        trt = np.asarray(self.treatment)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(n, -1) if cov.size else np.zeros((n, 0))
        if event.shape != (n,) or trt.shape != (n,) or cov.shape[0] != n:
            raise ValidationError("time, event, treatment and covariates must have n rows")
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ValidationError(f"tau must be positive and finite, got {self.tau}")

        bad = np.flatnonzero(~np.isfinite(time) | (time <= 0))
        if bad.size:
            raise ValidationError(f"nonpositive or non-finite time in rows {bad.tolist()}", bad)
        if not np.all(np.equal(np.mod(event, 1), 0)):
            raise ValidationError("event codes must be integers")
        event = event.astype(np.int64)
        J = int(self.J) if self.J else max(1, int(event.max(initial=0)))
        bad = np.flatnonzero((event < 0) | (event > J))
        if bad.size:
            raise ValidationError(f"event code outside 0..{J} in rows {bad.tolist()}", bad)
        bad = np.flatnonzero((trt != 0) & (trt != 1))
        if bad.size:
            raise ValidationError(f"treatment must be 0/1, rows {bad.tolist()}", bad)
        bad = np.flatnonzero(~np.all(np.isfinite(cov), axis=1))
        if bad.size:
            raise ValidationError(f"non-finite covariates in rows {bad.tolist()}", bad)

        names = tuple(self.covariate_names) or tuple(f"L{k + 1}" for k in range(cov.shape[1]))
        if len(names) != cov.shape[1]:
            raise ValidationError("covariate_names length does not match covariate dimension")

        object.__setattr__(self, "time", _frozen(time))
        object.__setattr__(self, "event", _frozen(event))
        object.__setattr__(self, "treatment", _frozen(trt.astype(np.int64)))
        object.__setattr__(self, "covariates", _frozen(cov))
        object.__setattr__(self, "tau", float(self.tau))
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    def __len__(self) -> int:
        return self.n

    def record(self, i: int) -> ObservedRecord:
        return ObservedRecord(
            covariates=tuple(float(v) for v in self.covariates[i]),
            treatment=int(self.treatment[i]),
            time=float(self.time[i]),
            event_type=int(self.event[i]),
        )

    @property
    def records(self) -> list[ObservedRecord]:
        return [self.record(i) for i in range(self.n)]

    def __iter__(self) -> Iterator[ObservedRecord]:
        for i in range(self.n):
            yield self.record(i)

    @classmethod
    def from_records(cls, records: Sequence[ObservedRecord], tau: float, J: int = 0,
                     covariate_names: Sequence[str] = ()) -> "Dataset":
        d = len(records[0].covariates) if records else 0
        bad = [i for i, r in enumerate(records) if len(r.covariates) != d]
        if bad:
            raise ValidationError(f"covariate length differs from {d} in rows {bad}", bad)
        return cls(
            time=np.array([r.time for r in records], dtype=float),
            event=np.array([r.event_type for r in records], dtype=np.int64),
            treatment=np.array([r.treatment for r in records], dtype=np.int64),
            covariates=np.array([r.covariates for r in records], dtype=float).reshape(len(records), d),
            tau=tau,
            J=J,
            covariate_names=tuple(covariate_names),
        )

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.time[index], self.event[index], self.treatment[index],
                       self.covariates[index], self.tau, self.J, self.covariate_names)

    def with_tau(self, tau: float) -> "Dataset":
        return Dataset(self.time, self.event, self.treatment, self.covariates, tau, self.J,
                       self.covariate_names)

    def require_events(self) -> None:
        """Raise unless at least one event of any type happens by ``tau``."""
        if not np.any((self.event >= 1) & (self.time <= self.tau)):
            raise ValidationError(f"no observed events at or before tau={self.tau}")


# --------------------------------------------------------------------------- csv

DEFAULT_SCHEMA = {"time": "time", "event": "event", "trt": "trt"}
_COVARIATE = re.compile(r"^L(\d+)$")


def load_csv(path, schema: Mapping[str, object] | None = None, tau: float | None = None,
             J: int = 0) -> Dataset:
    """Read a dataset from a CSV file with a header row.

    ``schema`` maps the logical names ``time``, ``event``, ``trt`` to column
    names, and optionally ``covariates`` to a list of column names. Without a
    ``covariates`` entry every column named ``L<k>`` is used, ordered by ``k``.
    Empty cells are treated as missing and reject their rows. ``tau`` defaults
    to the largest observed time.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = [row for row in reader if row and any(c.strip() for c in row)]

    cov_cols = schema.get("covariates")
    if cov_cols is None:
        found = [(int(m.group(1)), h) for h in header if (m := _COVARIATE.match(h))]
        cov_cols = [h for _, h in sorted(found)]
    cov_cols = list(cov_cols)
    wanted = [schema["time"], schema["event"], schema["trt"], *cov_cols]
    missing = [c for c in wanted if c not in header]
    if missing:
        raise ParseError(f"{path}: missing columns {missing}")
    pos = [header.index(c) for c in wanted]

    values = np.full((len(rows), len(pos)), np.nan)
    empty, malformed = [], []
    for i, row in enumerate(rows):
        if len(row) != len(header):
            malformed.append(i)
            continue
        for k, p in enumerate(pos):
            cell = row[p].strip()
            if cell == "":
                empty.append(i)
                break
            try:
                values[i, k] = float(cell)
            except ValueError:
                malformed.append(i)
                break
    if malformed:
        raise ParseError(f"{path}: malformed rows {sorted(set(malformed))}")
    if empty:
        rows_bad = sorted(set(empty))
        raise ValidationError(f"{path}: missing values in rows {rows_bad}", rows_bad)

    time = values[:, 0]
    if tau is None:
        tau = float(time.max()) if time.size else 1.0
    names = tuple(cov_cols) if schema.get("covariates") is not None else ()
    return Dataset(time=time, event=values[:, 1], treatment=values[:, 2],
                   covariates=values[:, 3:], tau=tau, J=J, covariate_names=names)


def write_csv(ds: Dataset, path) -> None:
    """Write ``ds`` in the default column layout (``time,event,trt,L1..Ld``)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "event", "trt", *[f"L{k + 1}" for k in range(ds.d)]])
        for i in range(ds.n):
            w.writerow([repr(float(ds.time[i])), int(ds.event[i]), int(ds.treatment[i]),
                        *[repr(float(v)) for v in ds.covariates[i]]])


# ------------------------------------------------------------------ risk sets

def risk_set_size(ds: Dataset, t: float) -> int:
    """Number of subjects still under observation at ``t`` (``T~ >= t``)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return int(np.count_nonzero(ds.time >= t))


def event_sequence(ds: Dataset) -> list[tuple[float, int, int]]:
    """Jumps of the counting processes as ``(time, record index, event type)``.

    Ties are kept in input order (stable sort).
    """
    order = np.argsort(ds.time, kind="stable")
    return [(float(ds.time[i]), int(i), int(ds.event[i])) for i in order]


def counting_process(ds: Dataset, times) -> np.ndarray:
    """``N_j(t)`` for every record: array of shape (J + 1, n, len(times)).

    Row ``j = 0`` is the censoring process.
    """
    times = np.asarray(times, dtype=float)
    jumped = ds.time[:, None] <= times[None, :]
    out = np.zeros((ds.J + 1, ds.n, times.size), dtype=np.int64)
    for j in range(ds.J + 1):
        out[j] = jumped & (ds.event == j)[:, None]
    return out


# ------------------------------------------------------------------ time grids

@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing grid ``0 = t_0 < t_1 < ... < t_K = tau``."""

    points: np.ndarray
    fallback: bool = False

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim != 1 or p.size < 2:
            raise ValueError("a time grid needs at least the points 0 and tau")
        if p[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if np.any(np.diff(p) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "points", _frozen(p))

    @property
    def tau(self) -> float:
        return float(self.points[-1])

    @property
    def n_intervals(self) -> int:
        return self.points.size - 1

    @property
    def left(self) -> np.ndarray:
        return self.points[:-1]

    @property
    def right(self) -> np.ndarray:
        return self.points[1:]

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.points)

    def event_interval(self, t) -> np.ndarray:
        """Interval index ``k`` with ``t in (t_k, t_{k+1}]``; -1 beyond tau."""
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.points, t, side="left") - 1
        return np.where((t > 0) & (t <= self.tau), np.maximum(k, 0), -1)

    def locate(self, t) -> np.ndarray:
        """Interval index ``k`` with ``t in [t_k, t_{k+1})`` (clipped to the grid)."""
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.points, t, side="right") - 1
        return np.clip(k, 0, self.n_intervals - 1)

    def exposure(self, times) -> np.ndarray:
        """At-risk time of each subject in each interval, shape (n, K)."""
        times = np.asarray(times, dtype=float)
        upper = np.minimum(times[:, None], self.right[None, :])
        return np.clip(upper - self.left[None, :], 0.0, None)

    def refine(self, n_uniform: int) -> "TimeGrid":
        """Union of this grid with ``n_uniform`` equal intervals on ``[0, tau]``."""
        pts = np.union1d(self.points, np.linspace(0.0, self.tau, n_uniform + 1))
        keep = np.concatenate([[True], np.diff(pts) > 1e-12 * self.tau])
        pts = pts[keep]
        pts[-1] = self.tau
        return TimeGrid(pts)

    def to_list(self) -> list[float]:
        return [float(v) for v in self.points]


def uniform_grid(tau: float, n_intervals: int) -> TimeGrid:
    pts = np.linspace(0.0, tau, n_intervals + 1)
    return TimeGrid(pts)


def event_time_grid(ds: Dataset, R: int, strategy: str = "quantile") -> TimeGrid:
    """Partition ``[0, tau]`` into ``R`` intervals.

    ``quantile`` puts the interior points at empirical quantiles of the observed
    event times (any type, ``<= tau``); ``uniform`` spaces them equally. With
    fewer than ``R`` distinct event times the quantile strategy falls back to
    the uniform grid and sets ``fallback``.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    if strategy == "uniform":
        return uniform_grid(ds.tau, R)
    if strategy != "quantile":
        raise ValueError(f"unknown grid strategy {strategy!r}")
    ev = ds.time[(ds.event >= 1) & (ds.time <= ds.tau)]
    if np.unique(ev).size < R:
        if R > 1:
            warnings.warn("too few distinct event times for a quantile grid; using uniform",
                          stacklevel=2)
        g = uniform_grid(ds.tau, R)
        return TimeGrid(g.points, fallback=R > 1)
    if R == 1:
        return TimeGrid(np.array([0.0, ds.tau]))
    inner = np.quantile(ev, np.arange(1, R) / R)
    inner = np.unique(inner[(inner > 0) & (inner < ds.tau)])
    return TimeGrid(np.concatenate([[0.0], inner, [ds.tau]]))


@dataclass(frozen=True, eq=False)
class CountingView:
    """Counting-process increments of a dataset over a time grid.

    Attributes
    ----------
    dN : array (J, n, K)
        ``dN[j-1, i, k] = 1`` when subject ``i`` has an event of type ``j`` in
        ``(t_k, t_{k+1}]`` and ``t <= tau``.
    exposure : array (n, K)
        Fraction of interval ``k`` during which subject ``i`` is at risk.
    at_risk_end : array (n, K)
        ``1{T~ >= t_{k+1}}``; used for hazards that jump at the right endpoint.
    """

    grid: TimeGrid
    dN: np.ndarray
    exposure: np.ndarray
    at_risk_end: np.ndarray

    @classmethod
    def build(cls, ds: Dataset, grid: TimeGrid) -> "CountingView":
        if abs(grid.tau - ds.tau) > 1e-12 * ds.tau:
            raise ValueError("grid must end at the dataset's tau")
        K = grid.n_intervals
        k = grid.event_interval(ds.time)
        dN = np.zeros((ds.J, ds.n, K))
        rows = np.flatnonzero((k >= 0) & (ds.event >= 1))
        dN[ds.event[rows] - 1, rows, k[rows]] = 1.0
        expo = grid.exposure(ds.time) / grid.widths[None, :]
        at_end = (ds.time[:, None] >= grid.right[None, :]).astype(float)
        return cls(grid, dN, expo, at_end)

    def risk_weights(self, discrete: bool) -> np.ndarray:
        return self.at_risk_end if discrete else self.exposure
