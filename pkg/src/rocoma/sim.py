"""Discrete-time grid-city EV mobility-on-demand environment.

One step is five minutes. Within a step the city rebalances idle EVs according
to the action, moving EVs advance, charging EVs gain energy, new ride requests
arrive, and a local assignment matches low-battery EVs to empty chargers and
vacant EVs to waiting requests in the same region.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from .core import (
    CostWeights,
    Grid,
    JointState,
    N_SLOTS,
    RebalanceAction,
    cost,
    fairness_charging,
    integer_split,
    fairness_mobility,
    reward,
)

IDLE, ON_TRIP, TO_CHARGER, CHARGING, REBALANCING = range(5)
STATUS_NAMES = ("idle", "on-trip", "to-charger", "charging", "rebalancing")

STEPS_PER_DAY = 288


@dataclass
class SimConfig:
    grid_rows: int = 5
    grid_cols: int = 5
    fleet_size: int = 100
    chargers_per_region: Optional[list] = None
    # (n_regions, n_periods) orders per step; the day is split evenly into periods
    demand_rates: Optional[np.ndarray] = None
    trip_kernel: Optional[np.ndarray] = None
    steps_per_episode: int = 25
    battery_capacity: float = 100.0
    energy_per_cell: float = 2.0
    low_battery_threshold: float = 20.0
    charge_per_step: float = 6.0
    patience_steps: int = 4
    seed: int = 0
    steps_per_day: int = STEPS_PER_DAY

    def __post_init__(self):
        n = self.grid_rows * self.grid_cols
        if self.grid_rows < 1 or self.grid_cols < 1 or self.fleet_size < 1:
            raise ValueError("grid dimensions and fleet size must be positive")
        if self.steps_per_episode < 1 or self.patience_steps < 0:
            raise ValueError("episode length must be positive")
        if not 0 < self.low_battery_threshold < self.battery_capacity:
            raise ValueError("low_battery_threshold must lie below battery_capacity")
        if self.energy_per_cell < 0 or self.charge_per_step <= 0:
            raise ValueError("energy rates must be positive")
        synth = None
        if self.chargers_per_region is None or self.demand_rates is None or self.trip_kernel is None:
            synth = synthetic_city(self.grid_rows, self.grid_cols, self.fleet_size, self.seed)
        if self.chargers_per_region is None:
            self.chargers_per_region = synth["chargers"]
        if self.demand_rates is None:
            self.demand_rates = synth["rates"]
        if self.trip_kernel is None:
            self.trip_kernel = synth["kernel"]
        self.chargers_per_region = np.asarray(self.chargers_per_region, dtype=np.int64)
        self.demand_rates = np.asarray(self.demand_rates, dtype=float)
        if self.demand_rates.ndim == 1:
            self.demand_rates = self.demand_rates[:, None]
        self.trip_kernel = np.asarray(self.trip_kernel, dtype=float)
        if self.chargers_per_region.shape != (n,) or (self.chargers_per_region < 0).any():
            raise ValueError("chargers_per_region needs one non-negative count per region")
        if self.demand_rates.shape[0] != n or (self.demand_rates < 0).any():
            raise ValueError("demand_rates needs one non-negative row per region")
        if self.trip_kernel.shape != (n, n) or (self.trip_kernel < 0).any():
            raise ValueError("trip_kernel must be an n_regions x n_regions matrix")
        if not np.allclose(self.trip_kernel.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("trip_kernel rows must sum to one")

    @property
    def n_regions(self) -> int:
        return self.grid_rows * self.grid_cols

    def rates_at(self, t: int) -> np.ndarray:
        periods = self.demand_rates.shape[1]
        phase = (t % self.steps_per_day) / self.steps_per_day
        return self.demand_rates[:, int(phase * periods) % periods]


@dataclass(frozen=True)
class PerturbConfig:
    demand_scale: float = 1.0
    charge_scale: float = 1.0
    kernel_noise: float = 0.0
    contamination: float = 0.0

    def __post_init__(self):
        if self.demand_scale <= 0 or self.charge_scale <= 0:
            raise ValueError("perturbation multipliers must be positive")
        if self.kernel_noise < 0:
            raise ValueError("kernel_noise must be non-negative")
        if not 0.0 <= self.contamination < 1.0:
            raise ValueError("contamination must lie in [0, 1)")

    @classmethod
    def nominal(cls) -> "PerturbConfig":
        return cls()

    @classmethod
    def default_perturbed(cls) -> "PerturbConfig":
        return cls(demand_scale=1.3, charge_scale=0.8, kernel_noise=0.1, contamination=0.05)


def synthetic_city(rows: int, cols: int, fleet_size: int, seed: int = 0, periods: int = 24) -> dict:
    """Two-peak synthetic demand, charger layout and trip kernel.

    Outer regions are residential and the centre is a business district:
    the morning peak sends riders inwards, the evening peak outwards.
    """
    rng = np.random.default_rng(seed + 7919)
    grid = Grid(rows, cols)
    n = grid.n
    cr, cc = (rows - 1) / 2, (cols - 1) / 2
    centrality = np.exp(-((grid.row_of - cr) ** 2 + (grid.col_of - cc) ** 2) / max(rows * cols / 8, 1.0))

    hours = (np.arange(periods) + 0.5) * 24.0 / periods
    morning = np.exp(-0.5 * ((hours - 8.0) / 1.2) ** 2)
    evening = np.exp(-0.5 * ((hours - 18.0) / 1.5) ** 2)
    night = (hours < 6) | (hours > 23)
    base = np.where(night, 0.3, 0.7)

    # commuter city: origins lean residential, destinations lean central, so an
    # unmanaged fleet drains into the centre (unmanaged response rate ~ 0.7)
    residential = (1.0 - centrality) ** 2
    residential = residential / residential.sum()
    business = centrality / centrality.sum()
    uniform = np.full(n, 1.0 / n)
    scale = 0.13 * fleet_size
    rates = scale * (
        base[None, :] * (0.5 * uniform + 0.5 * residential)[:, None]
        + 1.3 * morning[None, :] * residential[:, None]
        + 1.1 * evening[None, :] * (0.5 * business + 0.5 * residential)[:, None]
    )
    rates *= rng.uniform(0.8, 1.2, size=(n, 1))

    attract = 1.0 + 10.0 * centrality
    kernel = attract[None, :] * np.exp(-grid.dist / 4.0)
    kernel /= kernel.sum(axis=1, keepdims=True)

    chargers = rng.integers(0, 5, size=n)
    chargers[rng.integers(n)] += 2
    return {"rates": rates, "kernel": kernel, "chargers": chargers}


@dataclass
class StepInfo:
    moved_v: float
    moved_l: float
    served: int
    expired: int
    generated: int
    contaminated: bool
    u_c: float
    u_m: float


@dataclass
class Transition:
    s: JointState
    a: RebalanceAction
    r: float
    c: float
    s_next: JointState
    info: StepInfo


Trajectory = list  # list[Transition]


def _group_rank(groups: np.ndarray) -> np.ndarray:
    """Position of every element inside its run of equal values (input sorted by group)."""
    if groups.size == 0:
        return groups.copy()
    starts = np.r_[0, np.flatnonzero(np.diff(groups)) + 1]
    run_id = np.repeat(np.arange(starts.size), np.diff(np.r_[starts, groups.size]))
    return np.arange(groups.size) - starts[run_id]


def integer_split_rows(a: np.ndarray, n: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise largest-remainder split, identical to ``core.integer_split`` per row."""
    a = np.where(mask, np.clip(a, 0.0, None), 0.0)
    tot = a.sum(axis=1, keepdims=True)
    a = np.divide(a, tot, out=np.zeros_like(a), where=tot > 0)
    raw = a * n[:, None]
    m = np.floor(raw).astype(np.int64)
    frac = np.where(mask, raw - m, -1.0)
    short = n - m.sum(axis=1)
    order = np.argsort(-frac, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(a.shape[1])[None, :].repeat(a.shape[0], 0), axis=1)
    m += (rank < short[:, None]).astype(np.int64)
    return m


class GridCity:
    """A single exclusively-owned simulator instance.

    Fleet state lives in flat arrays indexed by EV; outstanding orders in
    arrays indexed by order. ``clone`` gives an independent copy, used to
    branch several one-step transitions from the same state.
    """

    def __init__(self, config: SimConfig, perturb: PerturbConfig = PerturbConfig(),
                 weights: CostWeights = CostWeights(), seed: Optional[int] = None):
        self.config = config
        self.perturb = perturb
        self.weights = weights
        self.grid = Grid(config.grid_rows, config.grid_cols)
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self.kernel = self._perturbed_kernel()
        self.chargers = config.chargers_per_region.copy()
        self.t = 0
        f = config.fleet_size
        self.pos = np.zeros(f, dtype=np.int64)
        self.battery = np.full(f, config.battery_capacity)
        self.status = np.zeros(f, dtype=np.int64)
        self.eta = np.zeros(f, dtype=np.int64)
        self._clear_orders()

    def _clear_orders(self):
        self.o_origin = np.zeros(0, dtype=np.int64)
        self.o_dest = np.zeros(0, dtype=np.int64)
        self.o_age = np.zeros(0, dtype=np.int64)
        self.generated = self.served = self.expired = 0
        self.contaminated_steps = 0
        self.steps_taken = 0

    def _perturbed_kernel(self) -> np.ndarray:
        k = self.config.trip_kernel
        if self.perturb.kernel_noise == 0:
            return k
        # separate stream so nominal and perturbed runs share their other draws
        z = np.random.default_rng(self.config.seed + 104729).standard_normal(k.shape)
        k = k * np.exp(self.perturb.kernel_noise * z)
        return k / k.sum(axis=1, keepdims=True)

    def clone(self, rng: Optional[np.random.Generator] = None) -> "GridCity":
        other = copy.copy(self)
        for name in ("pos", "battery", "status", "eta", "chargers", "o_origin", "o_dest", "o_age"):
            setattr(other, name, getattr(self, name).copy())
        other.rng = copy.deepcopy(self.rng) if rng is None else rng
        return other

    # ------------------------------------------------------------------ reset
    def reset(self, t0: Optional[int] = None) -> JointState:
        """Sample an initial state: uniform time of day, fleet placed proportionally to demand."""
        cfg = self.config
        self.t = int(self.rng.integers(cfg.steps_per_day)) if t0 is None else int(t0)
        rates = cfg.rates_at(self.t)
        w = rates if rates.sum() > 0 else np.ones(self.grid.n)
        counts = integer_split(w / w.sum(), cfg.fleet_size)
        self.pos = np.repeat(np.arange(self.grid.n), counts)
        lo = 0.5 * cfg.low_battery_threshold
        self.battery = self.rng.uniform(lo, cfg.battery_capacity, size=cfg.fleet_size)
        self.status = np.full(cfg.fleet_size, IDLE, dtype=np.int64)
        self.eta = np.zeros(cfg.fleet_size, dtype=np.int64)
        self._clear_orders()
        self._generate_demand()
        self.match()
        return self.observe()

    # ---------------------------------------------------------------- observe
    def _low(self) -> np.ndarray:
        return self.battery < self.config.low_battery_threshold

    def observe(self) -> JointState:
        n = self.grid.n
        idle = self.status == IDLE
        low = self._low()
        V = np.bincount(self.pos[idle & ~low], minlength=n)
        L = np.bincount(self.pos[idle & low], minlength=n)
        D = np.bincount(self.o_origin, minlength=n)
        charging = np.bincount(self.pos[self.status == CHARGING], minlength=n)
        E = self.chargers - charging
        return JointState(V, L, D, E, self.chargers.copy(), self.t,
                          self.config.grid_rows, self.config.grid_cols)

    # ------------------------------------------------------------------ match
    def _expire(self) -> int:
        keep = self.o_age <= self.config.patience_steps
        n_exp = int((~keep).sum())
        if n_exp:
            self.o_origin, self.o_dest, self.o_age = self.o_origin[keep], self.o_dest[keep], self.o_age[keep]
            self.expired += n_exp
        return n_exp

    def _match_chargers(self) -> list:
        n = self.grid.n
        cand = np.flatnonzero((self.status == IDLE) & self._low())
        if cand.size == 0:
            return []
        charging = np.bincount(self.pos[self.status == CHARGING], minlength=n)
        empty = self.chargers - charging
        order = np.lexsort((self.battery[cand], self.pos[cand]))
        cand = cand[order]
        rank = _group_rank(self.pos[cand])
        plug = cand[rank < empty[self.pos[cand]]]
        self.status[plug] = CHARGING
        return [(int(e), int(self.pos[e])) for e in plug]

    def _match_trips(self) -> list:
        cfg = self.config
        ev = np.flatnonzero((self.status == IDLE) & ~self._low())
        if ev.size == 0 or self.o_origin.size == 0:
            return []
        n = self.grid.n
        supply = np.bincount(self.pos[ev], minlength=n)
        demand = np.bincount(self.o_origin, minlength=n)
        take = np.minimum(supply, demand)
        ev = ev[np.argsort(self.pos[ev], kind="stable")]
        ev = ev[_group_rank(self.pos[ev]) < take[self.pos[ev]]]
        # oldest orders first, then arrival order
        oidx = np.lexsort((np.arange(self.o_origin.size), -self.o_age, self.o_origin))
        oidx = oidx[_group_rank(self.o_origin[oidx]) < take[self.o_origin[oidx]]]
        dest = self.o_dest[oidx]
        cells = np.maximum(self.grid.dist[self.pos[ev], dest], 1)
        self.status[ev] = ON_TRIP
        self.eta[ev] = cells
        self.pos[ev] = dest
        self.battery[ev] = np.maximum(self.battery[ev] - cfg.energy_per_cell * cells, 0.0)
        keep = np.ones(self.o_origin.size, dtype=bool)
        keep[oidx] = False
        pairs = list(zip(ev.tolist(), oidx.tolist()))
        self.o_origin, self.o_dest, self.o_age = self.o_origin[keep], self.o_dest[keep], self.o_age[keep]
        self.served += len(pairs)
        return pairs

    def match(self) -> tuple[int, dict]:
        """Expire stale orders, plug low-battery EVs into local chargers, serve local orders."""
        self._expire()
        plugs = self._match_chargers()
        trips = self._match_trips()
        return len(trips), {"trips": trips, "chargers": plugs}

    # ------------------------------------------------------------------- step
    def _rebalance(self, action: RebalanceAction, s: JointState) -> tuple[float, float]:
        cfg, grid = self.config, self.grid
        idle = self.status == IDLE
        low = self._low()
        moved = [0.0, 0.0]
        for k, (sel, a) in enumerate(((idle & ~low, action.a_v), (idle & low, action.a_l))):
            ev = np.flatnonzero(sel)
            if ev.size == 0:
                continue
            counts = np.bincount(self.pos[ev], minlength=grid.n)
            m = integer_split_rows(np.asarray(a, dtype=float), counts, grid.mask)
            if k == 0:
                ev = ev[np.argsort(self.pos[ev], kind="stable")]
                slot_order = np.tile(np.arange(N_SLOTS), (grid.n, 1))
            else:
                # lowest battery first, towards neighbours with the most empty chargers
                ev = ev[np.lexsort((self.battery[ev], self.pos[ev]))]
                richness = np.where(grid.mask, s.E[np.maximum(grid.nebr, 0)], -1)
                slot_order = np.argsort(-richness, axis=1, kind="stable")
            m_sorted = np.take_along_axis(m, slot_order, axis=1)
            cum = np.cumsum(m_sorted, axis=1)
            origin = self.pos[ev]
            rank = _group_rank(origin)
            which = (rank[:, None] >= cum[origin]).sum(axis=1)
            slot = slot_order[origin, which]
            dest = grid.nebr[origin, slot]
            dist = grid.dist[origin, dest]
            need = cfg.energy_per_cell * dist
            go = (dist > 0) & (self.battery[ev] >= need) & (self.battery[ev] > 0)
            ev, dest, dist, need = ev[go], dest[go], dist[go], need[go]
            self.pos[ev] = dest
            self.battery[ev] -= need
            self.eta[ev] = dist
            self.status[ev] = REBALANCING if k == 0 else TO_CHARGER
            moved[k] = float(dist.sum())
        return moved[0], moved[1]

    def _advance(self):
        cfg = self.config
        moving = np.isin(self.status, (ON_TRIP, TO_CHARGER, REBALANCING))
        self.eta[moving] -= 1
        arrived = moving & (self.eta <= 0)
        self.status[arrived] = IDLE
        self.eta[arrived] = 0
        ch = self.status == CHARGING
        self.battery[ch] = np.minimum(self.battery[ch] + cfg.charge_per_step * self.perturb.charge_scale,
                                      cfg.battery_capacity)
        done = ch & (self.battery >= cfg.low_battery_threshold + 0.25 * cfg.battery_capacity)
        self.status[done] = IDLE
        self.o_age += 1
        self.t += 1

    def _generate_demand(self) -> tuple[int, bool]:
        n = self.grid.n
        rates = self.config.rates_at(self.t) * self.perturb.demand_scale
        contaminated = self.perturb.contamination > 0 and self.rng.random() < self.perturb.contamination
        if contaminated:
            counts = self.rng.poisson(rates.sum() / n, size=n)
            dest = self.rng.integers(n, size=int(counts.sum()))
            self.contaminated_steps += 1
        else:
            counts = self.rng.poisson(rates)
            origin = np.repeat(np.arange(n), counts)
            cdf = np.cumsum(self.kernel[origin], axis=1)
            u = self.rng.random(origin.size)
            dest = np.minimum((u[:, None] > cdf).sum(axis=1), n - 1)
        origin = np.repeat(np.arange(n), counts)
        self.o_origin = np.r_[self.o_origin, origin]
        self.o_dest = np.r_[self.o_dest, dest]
        self.o_age = np.r_[self.o_age, np.zeros(origin.size, dtype=np.int64)]
        self.generated += int(origin.size)
        return int(origin.size), contaminated

    def step(self, action: RebalanceAction) -> tuple[JointState, float, float, StepInfo]:
        """Rebalance, advance one interval, match, and return (s', r, c, info).

        The cost is measured after rebalancing and charger assignment but before
        trip assignment, with supply counted as the vacant EVs present for matching.
        """
        action.validate(self.grid)
        s = self.observe()
        fleet_before = self.status.size
        moved_v, moved_l = self._rebalance(action, s)
        r = reward(moved_v, moved_l, self.weights)
        self._advance()
        served0, expired0 = self.served, self.expired
        generated, contaminated = self._generate_demand()
        self._expire()
        self._match_chargers()
        mid = self.observe()
        u_c = fairness_charging(mid) if (mid.C > 0).any() else 0.0
        u_m = fairness_mobility(mid, mid.V)
        c = cost(u_c, u_m, self.weights)
        self._match_trips()
        self.steps_taken += 1
        assert self.status.size == fleet_before
        info = StepInfo(moved_v, moved_l, self.served - served0, self.expired - expired0,
                        generated, contaminated, u_c, u_m)
        return self.observe(), r, c, info

    @property
    def outstanding(self) -> int:
        return int(self.o_origin.size)


def rollout(sim: GridCity, policy, T: int, rng: Optional[np.random.Generator] = None,
            reset: bool = True) -> Trajectory:
    """Run ``policy`` for ``T`` steps and record (s, a, r, c, s') tuples.

    ``policy`` is any callable-like object with ``act(state, rng) -> RebalanceAction``.
    """
    if T < 1:
        raise ValueError("horizon must be at least one step")
    rng = sim.rng if rng is None else rng
    s = sim.reset() if reset else sim.observe()
    traj = []
    for _ in range(T):
        a = policy.act(s, rng)
        s2, r, c, info = sim.step(a)
        traj.append(Transition(s, a, r, c, s2, info))
        s = s2
    return traj


def trace_to_csv(traj: Trajectory, path) -> None:
    """One row per region per step: t, region, V, L, D, E, C, r, c."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "region", "V", "L", "D", "E", "C", "r", "c"])
        for tr in traj:
            s = tr.s
            for i in range(s.n_regions):
                w.writerow([s.t, i, s.V[i], s.L[i], s.D[i], s.E[i], s.C[i], tr.r, tr.c])


_SIM_ARRAY_KEYS = ("chargers_per_region", "demand_rates", "trip_kernel")


def load_config(path) -> tuple[SimConfig, PerturbConfig]:
    """Read ``sim:`` and ``perturb:`` sections from a YAML file.

    Missing array fields (chargers, demand, trip kernel) come from the
    synthetic city generator seeded with ``sim.seed``.
    """
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    return sim_config_from_dict(doc.get("sim", {})), PerturbConfig(**doc.get("perturb", {}))


def sim_config_from_dict(d: dict) -> SimConfig:
    names = {f.name for f in dataclasses.fields(SimConfig)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown sim config keys: {sorted(unknown)}")
    return SimConfig(**d)


def sim_config_to_dict(cfg: SimConfig) -> dict:
    out = {}
    for f in dataclasses.fields(SimConfig):
        v = getattr(cfg, f.name)
        out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
    return out
