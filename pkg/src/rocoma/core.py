"""Domain types and the closed-form reward, cost and fairness functions.

Everything here is a pure function over small value types, shared by the
simulator, the trainer and the baseline policies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Neighbour slots, in this order, for every region: self, up, down, left, right.
NEIGHBOUR_OFFSETS = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))
N_SLOTS = len(NEIGHBOUR_OFFSETS)

SIMPLEX_ATOL = 1e-9


@dataclass(frozen=True)
class RegionState:
    V: int
    L: int
    D: int
    E: int
    C: int
    t: int
    row: int
    col: int
    index: int

    def __post_init__(self):
        if min(self.V, self.L, self.D) < 0:
            raise ValueError("negative counts in region state")
        if not 0 <= self.E <= self.C:
            raise ValueError("empty chargers must lie in [0, C]")


@dataclass
class JointState:
    """Per-region counts for the whole city at one time index.

    Stored column-wise (one array per field) so the fairness metrics and the
    encoders can work on whole vectors; ``regions`` gives the row view.
    """

    V: np.ndarray
    L: np.ndarray
    D: np.ndarray
    E: np.ndarray
    C: np.ndarray
    t: int
    rows: int
    cols: int

    def __post_init__(self):
        n = self.rows * self.cols
        for name in ("V", "L", "D", "E", "C"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have length {n}")
            setattr(self, name, arr)
        if (self.V < 0).any() or (self.L < 0).any() or (self.D < 0).any():
            raise ValueError("negative counts in joint state")
        if (self.E < 0).any() or (self.E > self.C).any():
            raise ValueError("empty chargers must lie in [0, C]")

    @property
    def n_regions(self) -> int:
        return self.rows * self.cols

    @property
    def regions(self) -> list[RegionState]:
        return [
            RegionState(int(self.V[i]), int(self.L[i]), int(self.D[i]), int(self.E[i]),
                        int(self.C[i]), self.t, i // self.cols, i % self.cols, i)
            for i in range(self.n_regions)
        ]

    @classmethod
    def from_regions(cls, regions: Sequence[RegionState], rows: int, cols: int) -> "JointState":
        if len(regions) != rows * cols:
            raise ValueError("region count does not match the grid")
        ts = {r.t for r in regions}
        if len(ts) != 1:
            raise ValueError("all regions must share the same time index")
        ordered = sorted(regions, key=lambda r: r.index)
        return cls(
            V=np.array([r.V for r in ordered]),
            L=np.array([r.L for r in ordered]),
            D=np.array([r.D for r in ordered]),
            E=np.array([r.E for r in ordered]),
            C=np.array([r.C for r in ordered]),
            t=ts.pop(), rows=rows, cols=cols,
        )


@dataclass(frozen=True)
class UncertaintyConfig:
    delta: float = 0.05
    gamma: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")


@dataclass(frozen=True)
class CostWeights:
    alpha_bar: float = 1.0
    beta_bar: float = 1.0
    d_step: float = -20.0

    def __post_init__(self):
        if self.alpha_bar <= 0 or self.beta_bar <= 0:
            raise ValueError("alpha_bar and beta_bar must be positive")


class Grid:
    """Region geometry of a rows x cols grid city.

    ``nebr[i, k]`` is the flat index of the k-th neighbour slot of region i
    (-1 where the slot falls outside the grid); ``mask`` marks valid slots.
    """

    def __init__(self, rows: int, cols: int):
        if rows < 1 or cols < 1:
            raise ValueError("grid needs at least one row and one column")
        self.rows, self.cols = rows, cols
        self.n = rows * cols
        self.row_of = np.arange(self.n) // cols
        self.col_of = np.arange(self.n) % cols
        nebr = np.full((self.n, N_SLOTS), -1, dtype=np.int64)
        for i in range(self.n):
            r, c = divmod(i, cols)
            for k, (dr, dc) in enumerate(NEIGHBOUR_OFFSETS):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    nebr[i, k] = rr * cols + cc
        self.nebr = nebr
        self.mask = nebr >= 0
        self.sizes = self.mask.sum(axis=1)
        self.dist = (np.abs(self.row_of[:, None] - self.row_of[None, :])
                     + np.abs(self.col_of[:, None] - self.col_of[None, :]))

    def neighbours(self, i: int) -> np.ndarray:
        return self.nebr[i][self.mask[i]]

    def __eq__(self, other):
        return isinstance(other, Grid) and (self.rows, self.cols) == (other.rows, other.cols)

    def __repr__(self):
        return f"Grid({self.rows}x{self.cols})"


def manhattan(grid: Grid, i: int, j: int) -> int:
    return int(grid.dist[i, j])


@dataclass
class RebalanceAction:
    """Two simplices per region, padded to the five neighbour slots.

    Row i of ``a_v``/``a_l`` holds the split of region i's vacant/low-battery
    EVs over its neighbour slots; slots outside the grid must carry zero mass.
    """

    a_v: np.ndarray
    a_l: np.ndarray

    def validate(self, grid: Grid) -> None:
        for name in ("a_v", "a_l"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != (grid.n, N_SLOTS):
                raise ValueError("action/grid mismatch")
            if (a < -SIMPLEX_ATOL).any() or (a > 1 + SIMPLEX_ATOL).any():
                raise ValueError(f"{name} entries must lie in [0, 1]")
            if (np.abs(a[~grid.mask]) > SIMPLEX_ATOL).any():
                raise ValueError(f"{name} puts mass outside the neighbourhood")
            if (np.abs(a.sum(axis=1) - 1.0) > SIMPLEX_ATOL).any():
                raise ValueError(f"{name} rows must sum to one")

    @classmethod
    def stay(cls, grid: Grid) -> "RebalanceAction":
        a = np.zeros((grid.n, N_SLOTS))
        a[:, 0] = 1.0
        return cls(a, a.copy())


def fairness_charging(s: JointState) -> float:
    """Negative total deviation of regional empty-charger ratios from the city ratio.

    Regions without chargers are left out of both the sum and the city ratio.
    """
    has = s.C > 0
    if not has.any():
        raise ValueError("no charging infrastructure")
    E = s.E[has].astype(float)
    C = s.C[has].astype(float)
    glob = E.sum() / C.sum()
    return -float(np.abs(E / C - glob).sum())


def fairness_mobility(s: JointState, v_ava: Sequence[float]) -> float:
    """Negative total deviation of regional demand/supply ratios from the city ratio.

    Available supply is floored at one vehicle per region to keep ratios finite.
    """
    v = np.asarray(v_ava, dtype=float)
    if v.shape != s.D.shape:
        raise ValueError("v_ava must have one entry per region")
    if (v < 0).any():
        raise ValueError("available supply cannot be negative")
    v = np.maximum(v, 1.0)
    D = s.D.astype(float)
    glob = D.sum() / v.sum()
    return -float(np.abs(D / v - glob).sum())


def reward(c_v: float, c_l: float, w: CostWeights) -> float:
    if c_v < 0 or c_l < 0:
        raise ValueError("moving distances are non-negative")
    return -(c_v + w.alpha_bar * c_l)


def cost(u_c: float, u_m: float, w: CostWeights) -> float:
    return u_c + w.beta_bar * u_m


def integer_split(a: Sequence[float], n: int) -> np.ndarray:
    """Split ``n`` units over the simplex ``a`` by largest-remainder rounding.

    Ties between equal remainders go to the lowest index.
    """
    a = np.asarray(a, dtype=float)
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0 or a.size == 0:
        return np.zeros(a.size, dtype=np.int64)
    a = np.clip(a, 0.0, None)
    a = a / a.sum()
    raw = a * n
    m = np.floor(raw).astype(np.int64)
    frac = raw - m
    short = n - int(m.sum())
    # stable sort on -frac gives lowest index first among equal remainders
    order = np.argsort(-frac, kind="stable")
    if short > 0:
        m[order[:short]] += 1
    elif short < 0:
        for k in order[::-1]:
            if short == 0:
                break
            take = min(m[k], -short)
            m[k] -= take
            short += take
    return m
