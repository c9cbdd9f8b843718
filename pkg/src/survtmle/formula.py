"""Tiny covariate formula language shared by the Cox and logistic fitters.

Terms are joined by ``+``. A term is ``1`` (intercept), ``A`` (treatment),
``Lk`` (k-th covariate, 1-based, or any declared covariate name), ``Lk^2``,
or a product of those written with ``:``, e.g. ``L1:A``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

__all__ = ["Formula", "FormulaError"]

_FACTOR = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)(?:\^(\d+))?$")


class FormulaError(ValueError):
    code = "config.formula"


@dataclass(frozen=True)
class Formula:
    terms: tuple[tuple[tuple[str, int], ...], ...]
    intercept: bool = False

    @classmethod
    def parse(cls, text: str | None) -> "Formula":
        text = (text or "").strip()
        terms: list[tuple[tuple[str, int], ...]] = []
        intercept = False
        if text in ("", "0"):
            return cls((), False)
        for raw in text.split("+"):
            raw = raw.strip()
            if not raw:
                raise FormulaError(f"empty term in formula {text!r}")
            if raw == "1":
                intercept = True
                continue
            factors = []
            for f in raw.split(":"):
                m = _FACTOR.match(f.strip())
                if not m:
                    raise FormulaError(f"cannot parse term {raw!r}")
                power = int(m.group(2) or 1)
                if power < 1:
                    raise FormulaError(f"bad power in {raw!r}")
                factors.append((m.group(1), power))
            term = tuple(factors)
            if term not in terms:
                terms.append(term)
        return cls(tuple(terms), intercept)

    @property
    def names(self) -> list[str]:
        out = ["1"] if self.intercept else []
        for term in self.terms:
            out.append(":".join(v if p == 1 else f"{v}^{p}" for v, p in term))
        return out

    def __str__(self) -> str:
        return " + ".join(self.names) or "0"

    def check(self, covariate_names) -> None:
        known = {"A", *covariate_names, *(f"L{k + 1}" for k in range(len(covariate_names)))}
        for term in self.terms:
            for var, _ in term:
                if var not in known:
                    raise FormulaError(f"unknown variable {var!r}; known: {sorted(known)}")

    def design(self, treatment, covariates, covariate_names=(), with_intercept=None) -> np.ndarray:
        """Model matrix for the given treatment values and covariates."""
        covariates = np.asarray(covariates, dtype=float)
        n = covariates.shape[0]
        treatment = np.broadcast_to(np.asarray(treatment, dtype=float), (n,))
        names = list(covariate_names) or [f"L{k + 1}" for k in range(covariates.shape[1])]
        self.check(names)
        lookup = {"A": treatment}
        for k, nm in enumerate(names):
            lookup[nm] = covariates[:, k]
            lookup.setdefault(f"L{k + 1}", covariates[:, k])
        cols = []
        if self.intercept if with_intercept is None else with_intercept:
            cols.append(np.ones(n))
        for term in self.terms:
            col = np.ones(n)
            for var, p in term:
                col = col * lookup[var] ** p
            cols.append(col)
        return np.column_stack(cols) if cols else np.zeros((n, 0))
