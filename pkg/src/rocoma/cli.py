"""Command line entry points: train, eval, compare."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .baselines import Kind, make_policy
from .core import Grid
from .harness import EvalReport, compare, evaluate, write_comparison
from .sim import PerturbConfig, SimConfig, load_config
from .trainer import TrainConfig, actor, load_checkpoint, train

TRAINED = ("rocoma", Kind.NON_ROBUST.value, Kind.NON_CONSTRAINED.value)


def _read_train_config(path):
    sim_cfg, _ = load_config(path) if path else (SimConfig(), None)
    doc = {}
    if path:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
    return TrainConfig.from_dict(doc.get("train", {})), sim_cfg


def cmd_train(args) -> int:
    if args.resume:
        state, cfg, sim_cfg = load_checkpoint(args.resume)
    else:
        cfg, sim_cfg = _read_train_config(args.config)
        state = None
        if args.policy == Kind.NON_ROBUST.value:
            from .baselines import nonrobust_config
            cfg = nonrobust_config(cfg)
        elif args.policy == Kind.NON_CONSTRAINED.value:
            from .baselines import nonconstrained_config
            cfg = nonconstrained_config(cfg)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    state = train(cfg, sim_cfg, out_dir=args.out, state=state)
    print(f"trained {state.t} iterations; lambda={state.lam:.4g}; checkpoint {Path(args.out) / 'final.bin'}")
    return 0


def _env(args, sim_cfg):
    if args.env == "nominal":
        return PerturbConfig.nominal()
    if args.config:
        _, pert = load_config(args.config)
        if pert != PerturbConfig():
            return pert
    return PerturbConfig.default_perturbed()


def cmd_eval(args) -> int:
    sim_cfg = load_config(args.config)[0] if args.config else None
    if args.policy in TRAINED:
        if not args.checkpoint:
            raise ValueError(f"--policy {args.policy} needs --checkpoint")
        state, _, ck_sim = load_checkpoint(args.checkpoint)
        if sim_cfg is None:
            sim_cfg = ck_sim
        elif (sim_cfg.grid_rows, sim_cfg.grid_cols) != (ck_sim.grid_rows, ck_sim.grid_cols):
            raise ValueError("checkpoint/grid mismatch")
        policy = actor(state.theta, sim_cfg, greedy=not args.stochastic)
    else:
        sim_cfg = sim_cfg or SimConfig()
        policy = make_policy(args.policy, Grid(sim_cfg.grid_rows, sim_cfg.grid_cols))
    rep = evaluate(policy, sim_cfg, _env(args, sim_cfg), args.repeats, args.seed, name=args.name or args.policy,
                   env=args.env)
    rep.to_csv(args.out)
    agg = rep.aggregate()
    print(", ".join(f"{k}={agg[k]:.4g}" for k in ("rebalancing_cost", "system_fairness", "expired_orders",
                                                   "response_rate")))
    return 0


def cmd_compare(args) -> int:
    reports = [EvalReport.from_csv(p) for p in args.reports]
    rows = compare(reports, args.ref)
    if args.out:
        write_comparison(rows, args.out)
    cols = list(rows[0])
    print(",".join(cols))
    for r in rows:
        print(",".join(f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rocoma", description="Robust constrained fleet rebalancing.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--config", help="YAML with sim:, perturb: and train: sections")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--policy", choices=TRAINED, default="rocoma")
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", help="continue from a checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a policy over testing periods")
    e.add_argument("--policy", required=True, choices=[k.value for k in (Kind.NO, Kind.EDP, Kind.RDP, Kind.COP)]
                   + list(TRAINED))
    e.add_argument("--checkpoint")
    e.add_argument("--config")
    e.add_argument("--env", choices=("nominal", "perturbed"), default="nominal")
    e.add_argument("--repeats", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.add_argument("--name", help="row label in the report (defaults to the policy kind)")
    e.add_argument("--stochastic", action="store_true", help="sample actions instead of the Dirichlet mean")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="percent deltas against a reference report")
    c.add_argument("reports", nargs="+")
    c.add_argument("--ref", required=True, help="policy label of the reference row")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
