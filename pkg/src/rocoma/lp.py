"""A small dense two-phase simplex solver.

Solves  min c.x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  x >= 0
on a full tableau with Bland's rule, which is slow but cannot cycle.
Sized for the one-step rebalancing programs (a few hundred columns).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

OPTIMAL, INFEASIBLE, UNBOUNDED, ITERATION_LIMIT = "optimal", "infeasible", "unbounded", "iteration_limit"


@dataclass
class LpResult:
    status: str
    x: Optional[np.ndarray]
    fun: Optional[float]
    pivots: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    f = T[:, col].copy()
    f[row] = 0.0
    T -= np.outer(f, T[row])


def _run(T: np.ndarray, basis: np.ndarray, n_cols: int, tol: float, max_pivots: int) -> tuple[str, int]:
    """Bland's-rule simplex on tableau T (last row = reduced costs, last column = rhs)."""
    k = 0
    while True:
        red = T[-1, :n_cols]
        enter = np.flatnonzero(red < -tol)
        if enter.size == 0:
            return OPTIMAL, k
        if k >= max_pivots:
            return ITERATION_LIMIT, k
        col = int(enter[0])
        a = T[:-1, col]
        pos = a > tol
        if not pos.any():
            return UNBOUNDED, k
        ratios = np.full(a.shape, np.inf)
        ratios[pos] = T[:-1, -1][pos] / a[pos]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + tol * max(1.0, abs(best)))
        # Bland: among tied rows leave the one whose basic variable has the smallest index
        row = int(ties[np.argmin(basis[ties])])
        _pivot(T, row, col)
        basis[row] = col
        k += 1


def linprog(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, tol: float = 1e-9,
            max_pivots: int = 50000) -> LpResult:
    c = np.asarray(c, dtype=float)
    n = c.size
    A_ub = np.zeros((0, n)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=float))
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).ravel()
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq
    if m == 0:
        if (c < -tol).any():
            return LpResult(UNBOUNDED, None, None)
        return LpResult(OPTIMAL, np.zeros(n), 0.0)

    # standard form: [A_ub I; A_eq 0] [x; s] = b, rows flipped so b >= 0
    A = np.zeros((m, n + m_ub))
    A[:m_ub, :n] = A_ub
    A[:m_ub, n:] = np.eye(m_ub)
    A[m_ub:, :n] = A_eq
    b = np.r_[b_ub, b_eq]
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1
    n_std = n + m_ub

    # phase one: one artificial per row
    T = np.zeros((m + 1, n_std + m + 1))
    T[:m, :n_std] = A
    T[:m, n_std:n_std + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :n_std] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = np.arange(n_std, n_std + m)
    status, k1 = _run(T, basis, n_std + m, tol, max_pivots)
    if status != OPTIMAL:
        return LpResult(status, None, None, k1)
    if -T[-1, -1] > tol * max(1.0, np.abs(b).max()) * 1e3:
        return LpResult(INFEASIBLE, None, None, k1)

    # drive artificials out of the basis; rows where that is impossible are redundant
    keep = np.ones(m, dtype=bool)
    for row in range(m):
        if basis[row] >= n_std:
            cand = np.flatnonzero(np.abs(T[row, :n_std]) > tol)
            if cand.size:
                _pivot(T, row, int(cand[0]))
                basis[row] = cand[0]
            else:
                keep[row] = False
    T = np.vstack([T[:m][keep], T[-1:]])
    basis = basis[keep]
    T = np.delete(T, np.s_[n_std:n_std + m], axis=1)

    # phase two
    cost = np.r_[c, np.zeros(m_ub)]
    T[-1, :] = 0.0
    T[-1, :n_std] = cost
    for row, j in enumerate(basis):
        T[-1] -= cost[j] * T[row]
    status, k2 = _run(T, basis, n_std, tol, max_pivots)
    if status != OPTIMAL:
        return LpResult(status, None, None, k1 + k2)
    x = np.zeros(n_std)
    x[basis] = T[:-1, -1]
    x = np.maximum(x[:n], 0.0)
    return LpResult(OPTIMAL, x, float(c @ x), k1 + k2)
