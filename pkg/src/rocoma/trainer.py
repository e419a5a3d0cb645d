"""The robust constrained training loop (ROCOMA).

Each iteration collects on-policy samples, fits the robust reward and cost
critics, estimates a robust natural gradient for each objective, takes an
ascent step on the shared policy parameters and a projected descent step
on the Lagrange multiplier.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import CostWeights, Grid, RebalanceAction
from .critic import CriticDivergence, MlpApprox, RobustCritic, TransitionBatch
from .nn import DirichletPolicy, PolicyActor, joint_features, load_container, n_joint_features, save_container
from .rnpg import collect_group, estimate_from_groups, pinned_bias
from .sim import GridCity, PerturbConfig, SimConfig, sim_config_from_dict, sim_config_to_dict

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "avg_reward", "avg_cost", "avg_cost_value", "lambda", "slack")


@dataclass
class TrainConfig:
    iterations: int = 1250          # 20000 episodes / M
    alpha: float = 0.01             # policy step
    beta: float = 0.05              # multiplier step
    gamma: float = 0.99
    delta: float = 0.05
    d_step: float = -20.0
    d_override: Optional[float] = None
    alpha_bar: float = 1.0
    beta_bar: float = 1.0
    M: int = 16
    W: int = 500
    D: int = 8
    zeta: Optional[float] = None    # None: per-regression step from the score Gram matrix
    radius: float = 100.0
    bias_samples: int = 2
    critic_lr: float = 1e-3
    critic_epochs: int = 20
    seed: int = 0
    checkpoint_every: int = 0
    constrained: bool = True        # False: reward r + c, multiplier frozen at 0
    lambda0: float = 0.0
    minus_sign: bool = False        # theta += alpha (g_r - lambda g_c) instead of +
    lambda_per_step: bool = True    # measure the multiplier gradient in per-step units
    normalize_step: bool = True     # divide the primal step by (1 + lambda)
    chain_sgd: bool = True          # carry the regression iterate across outer samples

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be non-negative")

    @property
    def threshold(self) -> float:
        """Discounted constraint level: d_step / (1 - gamma) unless overridden."""
        if self.d_override is not None:
            return self.d_override
        return self.d_step / (1.0 - self.gamma)

    @property
    def weights(self) -> CostWeights:
        return CostWeights(self.alpha_bar, self.beta_bar, self.d_step)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lambda_update(lam: float, v_c_avg: float, d: float, beta: float) -> float:
    return max(lam - beta * (v_c_avg - d), 0.0)


class SimModel:
    """Grid-city simulator + shared Dirichlet policy as a sampling model.

    States are simulator snapshots; every transition works on a clone, so a
    snapshot can be branched any number of times.
    """

    def __init__(self, sim_cfg: SimConfig, weights: CostWeights, perturb: PerturbConfig = PerturbConfig()):
        self.base = GridCity(sim_cfg, perturb, weights)
        self.policy = DirichletPolicy(self.base.grid, sim_cfg.fleet_size)
        self.n_params = self.policy.n_params
        self.fleet_size = sim_cfg.fleet_size

    def initial(self, rng):
        sim = self.base.clone(rng=np.random.default_rng(rng.integers(2 ** 63)))
        sim.reset()
        return sim

    def act(self, theta, sim, rng, score=True):
        x = self.policy.features(sim.observe())
        a_v, a_l, _ = self.policy.sample(theta, x, rng)
        psi = self.policy.score(theta, x, a_v, a_l) if score else None
        return RebalanceAction(a_v, a_l), psi

    def transition(self, sim, action, rng):
        nxt = sim.clone(rng=np.random.default_rng(rng.integers(2 ** 63)))
        _, r, c, _ = nxt.step(action)
        return nxt, r, c

    def features(self, sim):
        return joint_features(sim.observe(), self.fleet_size)


@dataclass
class TrainState:
    theta: np.ndarray
    lam: float
    critic_r: RobustCritic
    critic_c: RobustCritic
    t: int = 0
    history: list = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    value_scale: Optional[tuple] = None
    last_grad_norms: tuple = (0.0, 0.0)


def _make_critic(model: SimModel, cfg: TrainConfig, rng, scale: float = 1.0) -> RobustCritic:
    n_in = n_joint_features(model.base.grid.n)
    return RobustCritic(MlpApprox(n_in, scale=scale), cfg.gamma, cfg.delta, lr=cfg.critic_lr, rng=rng)


def init_state(cfg: TrainConfig, model: SimModel) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    theta = model.policy.init(rng)
    cr = _make_critic(model, cfg, rng)
    cc = _make_critic(model, cfg, rng)
    return TrainState(theta, cfg.lambda0, cr, cc, rng=rng)


def _batch(groups, signal: Callable) -> TransitionBatch:
    xs, xn, sig, st, stn = [], [], [], [], []
    for g in groups:
        for (s, x, r, c, s2, x2) in g.path:
            xs.append(x); xn.append(x2); sig.append(signal(r, c)); st.append(s); stn.append(s2)
        br = g.branch
        for k in range(br.r.size):
            xs.append(br.x[k]); xn.append(br.x_next[k]); sig.append(signal(br.r[k], br.c[k]))
            st.append(br.start); stn.append(br.next_states[k])
    return TransitionBatch(np.array(xs), np.array(sig, float), np.array(xn), states=st, next_states=stn)


def _fit(critic: RobustCritic, batch: TransitionBatch, epochs: int):
    try:
        critic.fit(batch, epochs=epochs)
    except CriticDivergence:
        log.warning("critic diverged; halving its learning rate and retrying once")
        critic.opt.lr = critic.lr = critic.lr / 2
        critic.fit(batch, epochs=epochs)


def train_iteration(state: TrainState, cfg: TrainConfig, model: SimModel) -> dict:
    rng = state.rng
    reward_fn = None if cfg.constrained else (lambda r, c: r + c)
    sig_r = reward_fn or (lambda r, c: r)
    groups = [collect_group(model, state.theta, cfg.gamma, cfg.delta, cfg.D, rng) for _ in range(cfg.M)]
    batch_r = _batch(groups, sig_r)
    batch_c = dataclasses.replace(batch_r, r=_batch(groups, lambda r, c: c).r)

    if state.value_scale is None:
        # per-step magnitude of each signal, turned into a discounted scale
        sr = max(float(np.mean(np.abs(batch_r.r))), 1.0) / (1.0 - cfg.gamma * (1.0 - cfg.delta))
        sc = max(float(np.mean(np.abs(batch_c.r))), 1.0) / (1.0 - cfg.gamma * (1.0 - cfg.delta))
        state.value_scale = (sr, sc)
        state.critic_r.approx.scale, state.critic_c.approx.scale = sr, sc

    _fit(state.critic_r, batch_r, cfg.critic_epochs)
    _fit(state.critic_c, batch_c, cfg.critic_epochs)

    b_r = pinned_bias(model, state.theta, state.critic_r, "reward", cfg.W, cfg.D, rng,
                      cfg.bias_samples, cfg.zeta, cfg.radius, reward_fn, cfg.chain_sgd)
    g_r = estimate_from_groups(groups, state.critic_r, "reward", cfg.W, cfg.zeta, cfg.radius, b_r, reward_fn,
                               cfg.chain_sgd)
    step = g_r.g_tilde
    if cfg.constrained:
        b_c = pinned_bias(model, state.theta, state.critic_c, "cost", cfg.W, cfg.D, rng,
                          cfg.bias_samples, cfg.zeta, cfg.radius, chain=cfg.chain_sgd)
        g_c = estimate_from_groups(groups, state.critic_c, "cost", cfg.W, cfg.zeta, cfg.radius, b_c,
                                   chain=cfg.chain_sgd)
        sign = -1.0 if cfg.minus_sign else 1.0
        step = step + sign * state.lam * g_c.g_tilde
        if cfg.normalize_step:
            step = step / (1.0 + state.lam)

    x1 = np.array([g.x1 for g in groups])
    v_c_avg = float(np.mean(state.critic_c.value(x1)))
    d = cfg.threshold
    lam_prev = state.lam
    state.theta = state.theta + cfg.alpha * step
    if cfg.constrained:
        unit = (1.0 - cfg.gamma) if cfg.lambda_per_step else 1.0
        state.lam = lambda_update(state.lam, unit * v_c_avg, unit * d, cfg.beta)

    r_all = np.concatenate([[p[2] for p in g.path] for g in groups] + [g.branch.r for g in groups])
    c_all = np.concatenate([[p[3] for p in g.path] for g in groups] + [g.branch.c for g in groups])
    row = {
        "iteration": state.t,
        "avg_reward": float(np.mean(r_all)),
        "avg_cost": float(np.mean(c_all)),
        "avg_cost_value": v_c_avg,
        "lambda": lam_prev,
        "slack": v_c_avg - d,
    }
    state.last_grad_norms = (float(np.linalg.norm(g_r.g_tilde)),
                             float(np.linalg.norm(g_c.g_tilde)) if cfg.constrained else 0.0)
    state.history.append(row)
    state.t += 1
    return row


def train(cfg: TrainConfig, sim_cfg: SimConfig, out_dir=None, state: Optional[TrainState] = None,
          iterations: Optional[int] = None, callback: Optional[Callable] = None) -> TrainState:
    """Run (or continue) training; writes metrics.csv, timing.csv and checkpoints to ``out_dir``."""
    model = SimModel(sim_cfg, cfg.weights)
    if state is None:
        state = init_state(cfg, model)
    stop = cfg.iterations if iterations is None else state.t + iterations
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fresh = state.t == 0
        mf = open(out / "metrics.csv", "w" if fresh else "a", newline="")
        tf = open(out / "timing.csv", "w" if fresh else "a", newline="")
        mw, tw = csv.writer(mf), csv.writer(tf)
        if fresh:
            mw.writerow(METRIC_COLUMNS)
            tw.writerow(("iteration", "wall_time"))
    t0 = time.perf_counter()
    try:
        while state.t < stop:
            row = train_iteration(state, cfg, model)
            if out is not None:
                mw.writerow([row["iteration"]] + [repr(row[k]) for k in METRIC_COLUMNS[1:]])
                tw.writerow((row["iteration"], f"{time.perf_counter() - t0:.3f}"))
                if cfg.checkpoint_every and state.t % cfg.checkpoint_every == 0:
                    save_checkpoint(out / f"ckpt_{state.t:06d}.bin", state, cfg, sim_cfg)
            if callback is not None:
                callback(state, row)
    finally:
        if out is not None:
            mf.close()
            tf.close()
    if out is not None:
        save_checkpoint(out / "final.bin", state, cfg, sim_cfg)
    return state


def actor(state_or_theta, sim_cfg: SimConfig, greedy: bool = True) -> PolicyActor:
    theta = state_or_theta.theta if isinstance(state_or_theta, TrainState) else state_or_theta
    grid = Grid(sim_cfg.grid_rows, sim_cfg.grid_cols)
    return PolicyActor(DirichletPolicy(grid, sim_cfg.fleet_size), theta, greedy=greedy)


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path, state: TrainState, cfg: TrainConfig, sim_cfg: SimConfig) -> None:
    arrays = {"theta": state.theta, "lambda": np.array([state.lam])}
    for name, cr in (("critic_r", state.critic_r), ("critic_c", state.critic_c)):
        st = cr.state()
        arrays[f"{name}.theta"] = st["theta"]
        arrays[f"{name}.adam_m"] = st["adam_m"]
        arrays[f"{name}.adam_v"] = st["adam_v"]
    meta = {
        "t": state.t,
        "train": dataclasses.asdict(cfg),
        "sim": sim_config_to_dict(sim_cfg),
        "rng": state.rng.bit_generator.state,
        "value_scale": state.value_scale,
        "critic_adam_k": [state.critic_r.opt.k, state.critic_c.opt.k],
        "critic_lr": [state.critic_r.lr, state.critic_c.lr],
        "history": state.history,
    }
    save_container(path, arrays, meta)


def load_checkpoint(path) -> tuple[TrainState, TrainConfig, SimConfig]:
    arrays, meta = load_container(path)
    cfg = TrainConfig.from_dict(meta["train"])
    sim_cfg = sim_config_from_dict(meta["sim"])
    model = SimModel(sim_cfg, cfg.weights)
    if arrays["theta"].shape != (model.n_params,):
        raise ValueError("checkpoint/grid mismatch")
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    critics = []
    for k, name in enumerate(("critic_r", "critic_c")):
        cr = _make_critic(model, cfg, np.random.default_rng(0))
        cr.lr = cr.opt.lr = meta["critic_lr"][k]
        cr.load({"theta": arrays[f"{name}.theta"], "adam_m": arrays[f"{name}.adam_m"],
                 "adam_v": arrays[f"{name}.adam_v"], "adam_k": meta["critic_adam_k"][k]})
        if meta["value_scale"] is not None:
            cr.approx.scale = meta["value_scale"][k]
        critics.append(cr)
    vs = tuple(meta["value_scale"]) if meta["value_scale"] is not None else None
    state = TrainState(arrays["theta"].copy(), float(arrays["lambda"][0]), critics[0], critics[1],
                       t=int(meta["t"]), history=list(meta["history"]), rng=rng, value_scale=vs)
    return state, cfg, sim_cfg
