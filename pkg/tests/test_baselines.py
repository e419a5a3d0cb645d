import logging

import numpy as np
import pytest

from rocoma.baselines import (CopPolicy, FixedPolicy, Kind, edp_action, make_policy, no_action, rdp_action,
                              trained_config)
from rocoma.core import CostWeights, Grid, JointState, integer_split


def random_state(grid, rng):
    n = grid.n
    C = rng.integers(0, 4, n)
    return JointState(rng.integers(0, 9, n), rng.integers(0, 4, n), rng.integers(0, 9, n),
                      np.minimum(rng.integers(0, 4, n), C), C, int(rng.integers(288)), grid.rows, grid.cols)


def movement(grid, action, s, weights=CostWeights()):
    """Fractional cell-distance cost of an action: dist * (m_v + alpha_bar m_l)."""
    moved = (action.a_v * (np.arange(5) != 0)).sum(axis=1) @ s.V
    moved_l = (action.a_l * (np.arange(5) != 0)).sum(axis=1) @ s.L
    return moved + weights.alpha_bar * moved_l


# ------------------------------------------------------------ fixed rules

def test_edp_weights():
    g = Grid(5, 5)
    a = edp_action(g)
    assert np.allclose(a.a_v[12], 0.2)
    corner = a.a_v[0][g.mask[0]]
    assert np.allclose(corner, 1 / 3) and corner.size == 3
    pol = FixedPolicy(Kind.EDP, g)
    rng = np.random.default_rng(0)
    b = pol.act(random_state(g, rng), rng)
    c = pol.act(random_state(g, rng), rng)
    assert np.array_equal(b.a_v, c.a_v) and np.array_equal(b.a_l, c.a_l)


def test_no_action_stays():
    g = Grid(3, 3)
    a = no_action(g)
    assert np.all(a.a_v[:, 0] == 1) and np.all(a.a_l[:, 0] == 1)


def test_rdp_moments_and_reproducibility():
    g = Grid(3, 3)
    a = rdp_action(g, np.random.default_rng(5))
    b = rdp_action(g, np.random.default_rng(5))
    assert np.array_equal(a.a_v, b.a_v)
    rng = np.random.default_rng(1)
    draws = np.array([rdp_action(g, rng).a_v for _ in range(10_000)])
    assert np.allclose(draws.sum(axis=2), 1.0)
    k = g.sizes[:, None].astype(float)
    mean = draws.mean(axis=0)
    # Dirichlet(1,...,1) component variance (k-1) / (k^2 (k+1))
    sigma = np.sqrt((k - 1) / (k ** 2 * (k + 1)) / len(draws))
    assert np.all(np.abs(mean - 1 / k)[g.mask] <= 3 * np.broadcast_to(sigma, mean.shape)[g.mask] + 1e-12)


def test_fixed_baselines_emit_valid_actions():
    g = Grid(3, 4)
    rng = np.random.default_rng(2)
    pols = [make_policy(k, g) for k in ("no", "edp", "rdp")]
    for _ in range(10_000):
        s = random_state(g, rng)
        for p in pols:
            p.act(s, rng).validate(g)


def test_make_policy_rejects_trained_kinds():
    with pytest.raises(ValueError, match="trained"):
        make_policy("nonrobust", Grid(2, 2))
    assert trained_config("nonrobust").delta == 0.0
    assert trained_config("rocoma").delta == 0.05
    with pytest.raises(ValueError):
        trained_config("edp")


# --------------------------------------------------------------------- COP

def test_cop_balanced_state_stays_put():
    g = Grid(2, 2)
    s = JointState([2, 2, 2, 2], [1, 0, 1, 0], [2, 2, 2, 2], [1, 1, 1, 1], [2, 2, 2, 2], 0, 2, 2)
    a = CopPolicy(g).act(s)
    assert movement(g, a, s) == 0.0
    assert CopPolicy(g)._solve(s, 0.0).fun == pytest.approx(0.0)


def test_cop_two_region_toy_matches_enumeration():
    # 6 vacant EVs in region 0, demand 3 and 3; tight floor forces rebalancing
    g = Grid(1, 2)
    w = CostWeights(d_step=-0.01)
    s = JointState([6, 0], [0, 0], [3, 3], [0, 0], [0, 0], 0, 1, 2)
    pol = CopPolicy(g, w)
    a = pol.act(s)
    moved = integer_split(a.a_v[0][g.mask[0]], 6)
    right = int(np.flatnonzero(g.nebr[0][g.mask[0]] == 1)[0])
    # enumeration over integer moves m with the same linearised floor
    ratio = 1.0
    kappa = 1.0 / np.maximum(np.array([3.0, 3.0]) / ratio, 1.0)
    feasible = [m for m in range(7)
                if (kappa * np.abs(np.array([3.0, 3.0]) - ratio * np.array([6 - m, m]))).sum() <= 0.01]
    assert moved[right] == min(feasible) == 3
    assert pol.last_relaxation == 0.0


def test_cop_relaxes_unreachable_floor(caplog):
    # region 0's chargers are all busy and no low-battery EVs exist to even it out
    g = Grid(1, 2)
    s = JointState([1, 1], [0, 0], [1, 1], [0, 2], [2, 2], 0, 1, 2)
    pol = CopPolicy(g, CostWeights(d_step=-0.5))
    with caplog.at_level(logging.INFO, logger="rocoma.baselines"):
        a = pol.act(s)
    a.validate(g)
    # charging deviation sum is 1 against a floor of 0.5, so rho = 1
    assert pol.last_relaxation == pytest.approx(1.0, abs=1e-3)
    assert "relaxed" in caplog.text


def test_cop_falls_back_to_edp_on_solver_failure(monkeypatch, caplog):
    g = Grid(2, 2)
    pol = CopPolicy(g)
    import rocoma.baselines as bl

    class Failed:
        status, ok, x = "iteration_limit", False, None

    monkeypatch.setattr(bl, "linprog", lambda *a, **k: Failed())
    with caplog.at_level(logging.WARNING, logger="rocoma.baselines"):
        a = pol.act(random_state(g, np.random.default_rng(0)))
    assert np.array_equal(a.a_v, edp_action(g).a_v)
    assert pol.fallbacks == 1 and "equal split" in caplog.text


def test_cop_valid_on_random_states_and_no_costlier_than_edp():
    g = Grid(2, 2)
    pol = CopPolicy(g)
    rng = np.random.default_rng(3)
    for i in range(10_000):
        s = random_state(g, rng)
        a = pol.act(s)
        a.validate(g)
        if i < 500 and pol.last_relaxation == 0.0:
            res = pol._solve(s, 0.0)
            assert res.fun <= movement(g, edp_action(g), s) + 1e-9
    assert pol.fallbacks == 0
