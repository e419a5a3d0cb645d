"""A tour of the grid city and the four heuristic rebalancers.

Builds the default 5x5 synthetic city, steps it by hand for a few slots to
show what an observation contains, then scores the no-rebalancing, equal-split,
random-split and LP-based policies on both the nominal and the contaminated
environment.

Run:  python demos/02_city_and_baselines.py
"""

import numpy as np

from rocoma.baselines import make_policy
from rocoma.core import Grid
from rocoma.harness import compare, evaluate
from rocoma.sim import GridCity, PerturbConfig, SimConfig

cfg = SimConfig()
grid = Grid(cfg.grid_rows, cfg.grid_cols)
city = GridCity(cfg, seed=0)
state = city.reset()
print(f"{cfg.grid_rows}x{cfg.grid_cols} city, {cfg.fleet_size} EVs, {int(np.sum(cfg.chargers_per_region))} chargers")

edp = make_policy("edp", grid)
rng = np.random.default_rng(0)
for t in range(3):
    s, r, c, info = city.step(edp.act(state, rng))
    print(f"slot {t}: vacant={state.V.sum():3d} low={state.L.sum():2d} demand={state.D.sum():3d}"
          f"  r={r:7.1f} c={c:6.2f}")
    state = s

reports = []
for env, perturb in (("nominal", PerturbConfig.nominal()), ("perturbed", PerturbConfig.default_perturbed())):
    rows = []
    for kind in ("no", "edp", "rdp", "cop"):
        rows.append(evaluate(make_policy(kind, grid), cfg, perturb, repeats=3, seed=11, name=kind))
    reports.append(rows)
    print(f"\n{env} environment, 3 repeats of one period")
    print(f"  {'policy':6s} {'fairness':>9s} {'response %':>10s} {'expired':>8s} {'reb. cost':>9s}")
    for rep in rows:
        print(f"  {rep.policy:6s} {rep.mean('system_fairness'):9.1f} {rep.mean('response_rate'):10.1f}"
              f" {rep.mean('expired_orders'):8.1f} {rep.mean('rebalancing_cost'):9.1f}")

print("\nnominal, percent improvement relative to no rebalancing")
for row in compare(reports[0], "no"):
    print(f"  {row['policy']:6s} fairness {row['system_fairness_delta']:+6.1f}%"
          f"  response {row['response_rate_delta']:+5.1f} pp")
