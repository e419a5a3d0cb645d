"""Comparison policies.

NO, EDP, RDP and COP are stateless per-step rules. The two learning
baselines are trainer configurations rather than separate algorithms.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
from typing import Optional

import numpy as np

from .core import N_SLOTS, CostWeights, Grid, JointState, RebalanceAction
from .lp import linprog
from .nn import sample_dirichlet
from .trainer import TrainConfig

log = logging.getLogger(__name__)


class Kind(str, enum.Enum):
    NO = "no"
    EDP = "edp"
    RDP = "rdp"
    COP = "cop"
    NON_ROBUST = "nonrobust"
    NON_CONSTRAINED = "nonconstrained"


def no_action(grid: Grid) -> RebalanceAction:
    return RebalanceAction.stay(grid)


def edp_action(grid: Grid) -> RebalanceAction:
    """Uniform over each region's neighbourhood (itself included)."""
    a = grid.mask / grid.mask.sum(axis=1, keepdims=True)
    return RebalanceAction(a, a.copy())


def rdp_action(grid: Grid, rng: np.random.Generator) -> RebalanceAction:
    ones = grid.mask.astype(float)
    return RebalanceAction(sample_dirichlet(ones, grid.mask, rng), sample_dirichlet(ones, grid.mask, rng))


class FixedPolicy:
    def __init__(self, kind: Kind, grid: Grid):
        self.kind, self.grid = kind, grid

    def act(self, s: JointState, rng) -> RebalanceAction:
        if self.kind is Kind.NO:
            return no_action(self.grid)
        if self.kind is Kind.EDP:
            return edp_action(self.grid)
        return rdp_action(self.grid, rng)


class CopPolicy:
    """Myopic one-step LP: cheapest moves that keep both linearised fairness terms above the floor.

    Mobility term: with city ratio g = sum D / sum V, each region contributes
    |D_j - g S_j| / max(D_j / g, 1), where S_j is post-move vacant supply.
    Charging term: with g_c = (sum E - sum L)^+ / sum C over charger regions,
    each contributes |E_j - L'_j - g_c C_j| / C_j, where L'_j is low-battery
    arrivals. Both sums must stay below -d_step * (1 + rho); rho > 0 only when
    rho = 0 is infeasible, found by bisection.
    """

    def __init__(self, grid: Grid, weights: CostWeights = CostWeights(), bisect_steps: int = 12):
        self.grid = grid
        self.w = weights
        self.bisect_steps = bisect_steps
        self.last_relaxation = 0.0
        self.fallbacks = 0
        rows, slots = np.nonzero(grid.mask)
        self._src = rows
        self._dst = grid.nebr[rows, slots]
        self._slot = slots
        self._dist = (slots != 0).astype(float)

    def _program(self, s: JointState, budget: float):
        n, k = self.grid.n, self._src.size
        has_c = s.C > 0
        nc = int(has_c.sum())
        nv = 2 * k + n + nc
        c = np.zeros(nv)
        c[:k] = self._dist
        c[k:2 * k] = self.w.alpha_bar * self._dist
        # conservation
        A_eq = np.zeros((2 * n, nv))
        A_eq[self._src, np.arange(k)] = 1.0
        A_eq[n + self._src, k + np.arange(k)] = 1.0
        b_eq = np.r_[s.V, s.L].astype(float)
        ub_rows, ub_rhs = [], []
        # S_j = sum of vacant flows into j
        into = np.zeros((n, nv))
        into[self._dst, np.arange(k)] = 1.0
        D = s.D.astype(float)
        g = D.sum() / max(s.V.sum(), 1)
        if g > 0:
            kappa = 1.0 / np.maximum(D / g, 1.0)
            for j in range(n):
                e = np.zeros(nv)
                e[2 * k + j] = -1.0
                ub_rows += [kappa[j] * (-g * into[j]) + e, kappa[j] * (g * into[j]) + e]
                ub_rhs += [-kappa[j] * D[j], kappa[j] * D[j]]
            row = np.zeros(nv)
            row[2 * k:2 * k + n] = 1.0
            ub_rows.append(row)
            ub_rhs.append(budget)
        if nc:
            arrive = np.zeros((n, nv))
            arrive[self._dst, k + np.arange(k)] = 1.0
            E, C = s.E.astype(float), s.C.astype(float)
            gc = max(E[has_c].sum() - s.L.sum(), 0.0) / C[has_c].sum()
            for q, j in enumerate(np.flatnonzero(has_c)):
                f = np.zeros(nv)
                f[2 * k + n + q] = -1.0
                dev = (E[j] - gc * C[j]) / C[j]
                ub_rows += [-arrive[j] / C[j] + f, arrive[j] / C[j] + f]
                ub_rhs += [-dev, dev]
            row = np.zeros(nv)
            row[2 * k + n:] = 1.0
            ub_rows.append(row)
            ub_rhs.append(budget)
        A_ub = np.array(ub_rows) if ub_rows else None
        b_ub = np.array(ub_rhs) if ub_rhs else None
        return c, A_ub, b_ub, A_eq, b_eq

    def _solve(self, s, rho):
        return linprog(*self._program(s, -self.w.d_step * (1.0 + rho)))

    def _to_action(self, x, s: JointState) -> RebalanceAction:
        k, n = self._src.size, self.grid.n
        out = []
        for flows, tot in ((x[:k], s.V), (x[k:2 * k], s.L)):
            a = np.zeros((n, N_SLOTS))
            a[self._src, self._slot] = flows
            for i in range(n):
                if tot[i] > 0 and a[i].sum() > 0:
                    a[i] /= a[i].sum()
                else:
                    a[i] = 0.0
                    a[i, 0] = 1.0
            out.append(a)
        return RebalanceAction(out[0], out[1])

    def act(self, s: JointState, rng=None) -> RebalanceAction:
        res = self._solve(s, 0.0)
        rho = 0.0
        if res.status == "infeasible":
            lo, hi = 0.0, 1.0
            res_hi = self._solve(s, hi)
            while res_hi.status == "infeasible" and hi < 1e6:
                lo, hi = hi, hi * 4
                res_hi = self._solve(s, hi)
            for _ in range(self.bisect_steps):
                mid = 0.5 * (lo + hi)
                r = self._solve(s, mid)
                if r.status == "infeasible":
                    lo = mid
                else:
                    hi, res_hi = mid, r
            res, rho = res_hi, hi
            log.info("COP fairness floor relaxed by %.4f", rho)
        self.last_relaxation = rho
        if not res.ok:
            self.fallbacks += 1
            log.warning("COP linear program failed (%s); using the equal split", res.status)
            return edp_action(self.grid)
        return self._to_action(res.x, s)


def make_policy(kind, grid: Grid, weights: CostWeights = CostWeights()):
    kind = Kind(kind)
    if kind in (Kind.NO, Kind.EDP, Kind.RDP):
        return FixedPolicy(kind, grid)
    if kind is Kind.COP:
        return CopPolicy(grid, weights)
    raise ValueError(f"{kind.value} is a trained policy; load it from a checkpoint")


def nonrobust_config(cfg: TrainConfig) -> TrainConfig:
    return dataclasses.replace(cfg, delta=0.0)


def nonconstrained_config(cfg: TrainConfig) -> TrainConfig:
    return dataclasses.replace(cfg, constrained=False, lambda0=0.0)


def trained_config(kind, cfg: Optional[TrainConfig] = None) -> TrainConfig:
    cfg = TrainConfig() if cfg is None else cfg
    kind = Kind(kind) if not isinstance(kind, str) or kind != "rocoma" else kind
    if kind == "rocoma":
        return cfg
    if kind is Kind.NON_ROBUST:
        return nonrobust_config(cfg)
    if kind is Kind.NON_CONSTRAINED:
        return nonconstrained_config(cfg)
    raise ValueError(f"{kind} is not a trained policy")
