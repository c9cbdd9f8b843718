"""Compiled kernels for the L1-penalised Poisson coordinate descent.

The design is binary and nested in time: coefficient ``beta[r, c]`` switches
on for cells whose z-indicator ``c`` is one and for all intervals ``>= r``.
Because every feature is 0/1, the one-dimensional problem in a coordinate

    A exp(delta) - B delta + lam |b + delta|

has a closed-form minimiser, so each coordinate update is exact.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

__all__ = ["column_event_sums", "gradient", "sweep"]


@njit(cache=True)
def column_event_sums(col_ptr, col_rows, D):
    """``B[r, c]``: events on the support of coefficient ``(r, c)``."""
    M, K = D.shape
    C = col_ptr.size - 1
    B = np.zeros((K, C))
    s = np.empty(K)
    for c in range(C):
        s[:] = 0.0
        for p in range(col_ptr[c], col_ptr[c + 1]):
            m = col_rows[p]
            for r in range(K):
                s[r] += D[m, r]
        acc = 0.0
        for r in range(K - 1, -1, -1):
            acc += s[r]
            B[r, c] = acc
    return B


@njit(cache=True)
def gradient(col_ptr, col_rows, mu, B):
    """Gradient of the (unpenalised) Poisson loss with respect to ``beta``."""
    M, K = mu.shape
    C = col_ptr.size - 1
    G = np.empty((K, C))
    s = np.empty(K)
    for c in range(C):
        s[:] = 0.0
        for p in range(col_ptr[c], col_ptr[c + 1]):
            m = col_rows[p]
            for r in range(K):
                s[r] += mu[m, r]
        acc = 0.0
        for r in range(K - 1, -1, -1):
            acc += s[r]
            G[r, c] = acc - B[r, c]
    return G


@njit(cache=True)
def sweep(cols, col_ptr, col_rows, mu, eta, B, beta, lam, cap):
    """One cyclic pass over the z-columns in ``cols`` (all intervals each).

    Updates ``beta``, ``mu`` and ``eta`` in place and returns the largest
    subgradient violation seen before an update.
    """
    M, K = mu.shape
    s = np.empty(K)
    step = np.empty(K)
    worst = 0.0
    for ci in range(cols.size):
        c = cols[ci]
        s[:] = 0.0
        for p in range(col_ptr[c], col_ptr[c + 1]):
            m = col_rows[p]
            for r in range(K):
                s[r] += mu[m, r]
        moved = False
        for rp in range(K):
            step[rp] = 0.0
            A = 0.0
            for r in range(rp, K):
                A += s[r]
            b = beta[rp, c]
            l = 0.0 if (rp == 0 and c == 0) else lam
            if A <= 0.0:
                new = 0.0
            else:
                Bv = B[rp, c]
                new = 0.0
                if Bv - l > 0.0:
                    cand = b + math.log((Bv - l) / A)
                    if cand > 0.0:
                        new = cand
                if new == 0.0:
                    if Bv + l > 0.0:
                        cand = b + math.log((Bv + l) / A)
                    else:
                        cand = -cap
                    if cand < 0.0:
                        new = cand
                if new > cap:
                    new = cap
                elif new < -cap:
                    new = -cap
            d = new - b
            if d != 0.0:
                e = math.exp(d)
                viol = A * abs(e - 1.0)
                if viol > worst:
                    worst = viol
                beta[rp, c] = new
                for r in range(rp, K):
                    s[r] *= e
                step[rp] = d
                moved = True
        if moved:
            acc = 0.0
            for r in range(K):
                acc += step[r]
                step[r] = acc
            for r in range(K):
                if step[r] != 0.0:
                    e = math.exp(step[r])
                    for p in range(col_ptr[c], col_ptr[c + 1]):
                        m = col_rows[p]
                        mu[m, r] *= e
                        eta[m, r] += step[r]
    return worst
