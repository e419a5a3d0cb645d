import csv
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rocoma.baselines import nonconstrained_config, nonrobust_config
from rocoma.core import Grid
from rocoma.sim import GridCity, SimConfig
from rocoma.trainer import METRIC_COLUMNS, TrainConfig, actor, lambda_update, load_checkpoint, train

TINY_SIM = SimConfig(grid_rows=2, grid_cols=2, fleet_size=12, seed=0)


def tiny(**kw):
    base = dict(iterations=3, M=2, D=2, W=20, bias_samples=1, critic_epochs=3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def read_metrics(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------- config

def test_config_validation_and_threshold():
    with pytest.raises(ValueError):
        TrainConfig(alpha=0)
    with pytest.raises(ValueError):
        TrainConfig(beta=-1)
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(lambda0=-0.5)
    assert TrainConfig().threshold == pytest.approx(-2000.0)
    assert TrainConfig(d_override=-7.0).threshold == -7.0
    assert TrainConfig(alpha_bar=2.0).weights.alpha_bar == 2.0
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"alpah": 0.1})


def test_baseline_configs_only_flip_their_switch():
    cfg = TrainConfig(seed=4)
    nr, nc = nonrobust_config(cfg), nonconstrained_config(cfg)
    assert nr.delta == 0.0 and nr.constrained
    assert not nc.constrained and nc.lambda0 == 0.0 and nc.delta == cfg.delta
    assert dataclasses.replace(nr, delta=cfg.delta) == cfg


# ------------------------------------------------------ multiplier step

def test_lambda_update_examples():
    assert lambda_update(1.0, -10.0, -20.0, 0.1) == 0.0
    assert lambda_update(0.7, -20.0, -20.0, 0.1) == 0.7
    assert lambda_update(0.0, -25.0, -20.0, 0.1) > 0.0


@given(st.floats(0, 100), st.lists(st.tuples(st.floats(-1e4, 1e4), st.floats(1e-4, 10)), max_size=50))
def test_lambda_stays_non_negative(lam, steps):
    for v, beta in steps:
        lam = lambda_update(lam, v, -20.0, beta)
        assert lam >= 0.0


# ------------------------------------------------------------- training

def test_tiny_run_writes_metrics_and_checkpoint(tmp_path):
    st = train(tiny(), TINY_SIM, out_dir=tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert list(rows[0]) == list(METRIC_COLUMNS)
    assert [int(r["iteration"]) for r in rows] == [0, 1, 2]
    assert all(math.isfinite(float(r[k])) for r in rows for k in METRIC_COLUMNS)
    timing = read_metrics(tmp_path / "timing.csv")
    assert len(timing) == 3 and float(timing[-1]["wall_time"]) >= 0
    assert (tmp_path / "final.bin").exists()
    assert st.t == 3 and st.lam >= 0 and np.isfinite(st.theta).all()
    act = actor(st, TINY_SIM).act(GridCity(TINY_SIM).reset(), np.random.default_rng(0))
    act.validate(Grid(2, 2))


def test_unconstrained_sanity_keeps_multiplier_at_zero():
    st = train(tiny(d_override=-math.inf, lambda0=0.0, iterations=4), TINY_SIM)
    assert [h["lambda"] for h in st.history] == [0.0] * 4
    assert st.lam == 0.0


def test_positive_slack_drives_multiplier_down():
    st = train(tiny(d_override=-1e7, lambda0=5.0, iterations=4, beta=1e-3), TINY_SIM)
    lams = [h["lambda"] for h in st.history] + [st.lam]
    assert all(h["slack"] > 0 for h in st.history)
    assert all(b <= a for a, b in zip(lams, lams[1:]))
    assert lams[-1] == 0.0


def test_nonconstrained_run_freezes_multiplier():
    st = train(nonconstrained_config(tiny(iterations=3, lambda0=3.0)), TINY_SIM)
    assert st.lam == 0.0 and all(h["lambda"] == 0.0 for h in st.history)


def test_sign_flag_changes_the_step_only_through_the_cost_term():
    a = train(tiny(iterations=1, lambda0=2.0), TINY_SIM)
    b = train(tiny(iterations=1, lambda0=2.0, minus_sign=True), TINY_SIM)
    c = train(tiny(iterations=1, lambda0=0.0), TINY_SIM)
    d = train(tiny(iterations=1, lambda0=0.0, minus_sign=True), TINY_SIM)
    assert not np.array_equal(a.theta, b.theta)
    assert np.array_equal(c.theta, d.theta)


def test_identical_seeds_give_identical_metrics(tmp_path):
    train(tiny(), TINY_SIM, out_dir=tmp_path / "a")
    train(tiny(), TINY_SIM, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    train(tiny(seed=1), TINY_SIM, out_dir=tmp_path / "c")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "c" / "metrics.csv").read_bytes()


def test_checkpoint_resume_is_bitwise_identical(tmp_path):
    cfg = tiny(iterations=4, checkpoint_every=2)
    full = train(cfg, TINY_SIM, out_dir=tmp_path / "full")
    assert (tmp_path / "full" / "ckpt_000002.bin").exists()
    state, cfg2, sim2 = load_checkpoint(tmp_path / "full" / "ckpt_000002.bin")
    assert cfg2 == cfg and state.t == 2
    assert np.array_equal(sim2.trip_kernel, TINY_SIM.trip_kernel)
    resumed = train(cfg2, sim2, state=state)
    assert np.array_equal(resumed.theta, full.theta)
    assert resumed.lam == full.lam
    assert resumed.history == full.history


def test_resume_appends_to_metrics(tmp_path):
    train(tiny(iterations=2), TINY_SIM, out_dir=tmp_path)
    state, cfg, sim = load_checkpoint(tmp_path / "final.bin")
    train(cfg, sim, out_dir=tmp_path, state=state, iterations=2)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [int(r["iteration"]) for r in rows] == [0, 1, 2, 3]


# -------------------------------------------------------------- smoke

@pytest.mark.slow
def test_smoke_benchmark_reward_improves():
    """2x2 grid, 200 iterations: late mean reward >= early mean reward in >= 8/10 seeds."""
    sim = SimConfig(grid_rows=2, grid_cols=2, fleet_size=16, seed=0)
    improved = 0
    for seed in range(10):
        cfg = TrainConfig(iterations=200, M=2, D=4, W=50, bias_samples=1, critic_epochs=3, seed=seed)
        r = np.array([h["avg_reward"] for h in train(cfg, sim).history])
        improved += r[-50:].mean() >= r[:50].mean()
    assert improved >= 8
