"""Evaluation over fixed-length testing periods and report comparison."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import CostWeights
from .sim import GridCity, PerturbConfig, SimConfig, rollout

METRICS = ("rebalancing_cost", "system_fairness", "expired_orders", "response_rate")
PERIOD_STEPS = 25


@dataclass
class RepeatRow:
    repeat: int
    rebalancing_cost: float
    system_fairness: float
    expired_orders: int
    response_rate: float
    served: int
    total_orders: int
    zero_demand: bool = False


@dataclass
class EvalReport:
    policy: str
    env: str
    rows: list = field(default_factory=list)

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.rows], dtype=float)

    def mean(self, metric: str) -> float:
        return float(self.values(metric).mean())

    def std(self, metric: str) -> float:
        v = self.values(metric)
        return float(v.std(ddof=1)) if v.size > 1 else 0.0

    def aggregate(self) -> dict:
        out = {"policy": self.policy, "env": self.env}
        for m in METRICS:
            out[m] = self.mean(m)
            out[m + "_std"] = self.std(m)
        return out

    def to_csv(self, path) -> None:
        cols = ["policy", "env", "repeat", *METRICS, "served", "total_orders", "zero_demand"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([self.policy, self.env, r.repeat, repr(r.rebalancing_cost), repr(r.system_fairness),
                            r.expired_orders, repr(r.response_rate), r.served, r.total_orders, int(r.zero_demand)])
            agg = self.aggregate()
            w.writerow([self.policy, self.env, "mean", *[repr(agg[m]) for m in METRICS], "", "", ""])
            w.writerow([self.policy, self.env, "std", *[repr(agg[m + "_std"]) for m in METRICS], "", "", ""])

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or any(m not in rows[0] for m in METRICS):
            raise ValueError("incomparable reports")
        rep = cls(rows[0]["policy"], rows[0]["env"])
        for r in rows:
            if r["repeat"] in ("mean", "std"):
                continue
            rep.rows.append(RepeatRow(int(r["repeat"]), float(r["rebalancing_cost"]), float(r["system_fairness"]),
                                      int(r["expired_orders"]), float(r["response_rate"]), int(r["served"]),
                                      int(r["total_orders"]), bool(int(r["zero_demand"]))))
        return rep


def repeat_seeds(seed: int, repeats: int) -> list[int]:
    """Per-repeat seeds: the i-th child of SeedSequence(seed), reduced to one 63-bit integer."""
    return [int(c.generate_state(2, np.uint32).view(np.uint64)[0] >> np.uint64(1))
            for c in np.random.SeedSequence(seed).spawn(repeats)]


def run_period(policy, sim_cfg: SimConfig, perturb: PerturbConfig, seed: int,
               weights: CostWeights = CostWeights(), steps: int = PERIOD_STEPS, repeat: int = 0) -> RepeatRow:
    sim = GridCity(sim_cfg, perturb, weights, seed=seed)
    rng = np.random.default_rng(seed ^ 0x5DEECE66D)
    traj = rollout(sim, policy, steps, rng)
    moved = sum(tr.info.moved_v + tr.info.moved_l for tr in traj)
    fairness = sum(tr.c for tr in traj)
    total = sim.generated
    zero = total == 0
    rate = 100.0 if zero else 100.0 * sim.served / total
    return RepeatRow(repeat, float(moved), float(fairness), int(sim.expired), rate, int(sim.served), int(total), zero)


def evaluate(policy, sim_cfg: SimConfig, perturb: PerturbConfig = PerturbConfig(), repeats: int = 10,
             seed: int = 0, name: str = "policy", env: Optional[str] = None,
             weights: CostWeights = CostWeights()) -> EvalReport:
    """Run ``repeats`` independent testing periods of 25 steps each.

    ``policy`` needs ``act(state, rng)``. The simulator config is never
    modified; perturbations only live inside the per-repeat simulator.
    """
    if repeats < 1:
        raise ValueError("repeats must be positive")
    if env is None:
        env = "nominal" if perturb == PerturbConfig() else "perturbed"
    rep = EvalReport(name, env)
    for i, s in enumerate(repeat_seeds(seed, repeats)):
        rep.rows.append(run_period(policy, sim_cfg, perturb, s, weights, repeat=i))
    return rep


def pct_delta(value: float, ref: float, higher_is_better: bool = True) -> float:
    """Improvement of ``value`` over ``ref`` in percent of |ref|."""
    if ref == 0:
        return 0.0 if value == ref else math.copysign(math.inf, value - ref)
    d = (value - ref) / abs(ref) * 100.0
    return d if higher_is_better else -d


# rebalancing cost and expired orders: lower is better
_HIGHER_BETTER = {"rebalancing_cost": False, "system_fairness": True, "expired_orders": False, "response_rate": True}


def compare(reports: Sequence[EvalReport], ref: str) -> list[dict]:
    """One row per report with means and percent improvements over the ``ref`` policy.

    Response rate deltas are in percentage points, the others relative.
    """
    if len(reports) < 2:
        raise ValueError("need at least two reports")
    envs = {r.env for r in reports}
    if len(envs) != 1:
        raise ValueError(f"incomparable reports: mismatched environments {sorted(envs)}")
    by_name = {r.policy: r for r in reports}
    if ref not in by_name:
        raise ValueError(f"reference {ref!r} not among reports")
    base = by_name[ref]
    out = []
    for r in reports:
        row = {"policy": r.policy, "env": r.env}
        for m in METRICS:
            row[m] = r.mean(m)
            if m == "response_rate":
                row[m + "_delta"] = row[m] - base.mean(m)
            else:
                row[m + "_delta"] = pct_delta(row[m], base.mean(m), _HIGHER_BETTER[m])
        out.append(row)
    return out


def write_comparison(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
