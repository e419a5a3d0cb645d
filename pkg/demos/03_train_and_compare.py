"""Train a small robust constrained policy, reload it, and compare.

A 3x3 city with 36 EVs keeps the default 150 iterations near a minute on one core.  The
script prints the multiplier and the running reward/cost as training goes,
writes a checkpoint, reloads it for greedy evaluation, and ranks the result
against no rebalancing and the equal split.

On this small city the default floor of -20 per step never binds, so the
multiplier stays at zero and the policy mostly learns to rebalance less.
Pass a tighter floor (for example -4) as the second argument to watch the
multiplier switch on and push fairness back up.

Run:  python demos/03_train_and_compare.py [iterations] [floor per step]
"""

import sys
import tempfile
from pathlib import Path

from rocoma.baselines import make_policy
from rocoma.core import Grid
from rocoma.harness import compare, evaluate
from rocoma.sim import PerturbConfig, SimConfig
from rocoma.trainer import TrainConfig, actor, load_checkpoint, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 150
sim = SimConfig(grid_rows=3, grid_cols=3, fleet_size=36, seed=3)
floor = float(sys.argv[2]) if len(sys.argv) > 2 else -20.0
cfg = TrainConfig(iterations=iterations, M=2, D=4, W=50, bias_samples=1, critic_epochs=3, seed=0, d_step=floor)


def show(i, row):
    if i % 10 == 0 or i == iterations - 1:
        print(f"  iter {i:4d}  reward/step {row['avg_reward']:7.2f}  cost/step {row['avg_cost']:7.2f}"
              f"  lambda {row['lambda']:.3g}")


with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp) / "run"
    print(f"training {iterations} iterations (delta={cfg.delta}, cost floor {cfg.d_step}/step)")
    state = train(cfg, sim, out_dir=out)
    for i, row in enumerate(state.history):
        show(i, row)
    state, cfg_back, sim_back = load_checkpoint(out / "final.bin")
    print(f"reloaded checkpoint at iteration {state.t}, {state.theta.size} policy parameters")

    grid = Grid(sim.grid_rows, sim.grid_cols)
    pert = PerturbConfig.default_perturbed()
    for env, p in (("nominal", PerturbConfig.nominal()), ("perturbed", pert)):
        reports = [evaluate(actor(state, sim_back), sim_back, p, repeats=5, seed=7, name="rocoma")]
        reports += [evaluate(make_policy(k, grid), sim_back, p, repeats=5, seed=7, name=k) for k in ("no", "edp")]
        print(f"\n{env}: change relative to no rebalancing")
        for row in compare(reports, "no"):
            print(f"  {row['policy']:7s} fairness {row['system_fairness_delta']:+6.1f}%"
                  f"  response {row['response_rate_delta']:+5.1f} pp"
                  f"  rebalancing cost {row['rebalancing_cost']:7.1f}")
