"""Robust natural policy gradient by least-squares regression onto scores.

The natural gradient F(theta)^+ grad v(s1) is the minimiser of

    sum_{s,a} d(s) pi(a|s) [g . psi(s,a) - phi(s,a) - bias(s,a)]^2

where phi is the robust TD residual and the bias term carries the gradient
of the worst-state value. Sampled estimates draw the regression points from
the robust discounted visitation (a Geom(1 - gamma + gamma*delta) horizon)
and minimise by projected gradient descent, one regression per agent with
that agent's own score, averaged over agents.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Protocol, Sequence

import numpy as np

from .critic import RobustCritic, robust_td_target


@dataclass
class GradEstimate:
    g_tilde: np.ndarray
    objective: str
    M: int
    W: int
    D: int

    def __post_init__(self):
        if not np.isfinite(self.g_tilde).all():
            raise FloatingPointError("non-finite natural gradient estimate")


@dataclass
class TdResidualTerms:
    phi: np.ndarray
    b: np.ndarray  # bias direction in parameter space; zero when delta == 0


def geom_success(gamma: float, delta: float) -> float:
    return 1.0 - gamma + gamma * delta


def bias_coefficient(gamma: float, delta: float) -> float:
    """gamma*delta / (1 - gamma + gamma*delta), the weight of grad min_s v."""
    return gamma * delta / geom_success(gamma, delta)


def sample_horizon(gamma: float, delta: float, rng: np.random.Generator) -> int:
    q = geom_success(gamma, delta)
    if not 0.0 < q <= 1.0:
        raise ValueError("1 - gamma + gamma*delta must lie in (0, 1]")
    return int(rng.geometric(q))


def residual(r, v_s, v_next, v_min: float, gamma: float, delta: float,
             bias_dir: Optional[np.ndarray] = None, n_params: Optional[int] = None) -> TdResidualTerms:
    """Robust TD residual phi = target - v(s) for a batch of transitions.

    ``bias_dir`` is the parameter-space bias direction (see ``pinned_bias``);
    it is dropped (zero) when delta == 0.
    """
    phi = robust_td_target(np.asarray(r, float), np.asarray(v_next, float), v_min, gamma, delta) - np.asarray(v_s, float)
    if delta == 0.0 or bias_dir is None:
        size = n_params if bias_dir is None else np.shape(bias_dir)[-1]
        b = np.zeros(0 if size is None else size)
    else:
        b = np.asarray(bias_dir, dtype=float)
    return TdResidualTerms(phi, b)


def residual_from_critic(r, x, x_next, critic: RobustCritic,
                         bias_dir: Optional[np.ndarray] = None) -> TdResidualTerms:
    v_min, _ = critic.min_value()
    return residual(r, critic.value(x), critic.value(x_next), v_min, critic.gamma, critic.delta, bias_dir)


def regression_targets(psi: np.ndarray, terms: TdResidualTerms) -> np.ndarray:
    """phi + psi . b for every score row (psi has the parameter axis last)."""
    if terms.b.size == 0 or not terms.b.any():
        return np.broadcast_to(terms.phi, psi.shape[:-1]).astype(float)
    return terms.phi + psi @ terms.b


def project_l2(g: np.ndarray, radius: float) -> np.ndarray:
    nrm = np.linalg.norm(g)
    return g if nrm <= radius else g * (radius / nrm)


def sgd_step(g: np.ndarray, psi: np.ndarray, target: np.ndarray, zeta: float, radius: float = 100.0) -> np.ndarray:
    """One projected step on L(g) = mean_k (g . psi_k - target_k)^2."""
    psi = np.atleast_2d(psi)
    grad = 2.0 * psi.T @ (psi @ g - target) / len(target)
    return project_l2(g - zeta * grad, radius)


def auto_zeta(K: np.ndarray, D: int) -> float:
    """Step size that solves the stiffest direction of the regression in one step."""
    lam = np.linalg.eigvalsh(K).max() if K.size else 0.0
    return 0.5 * D / lam if lam > 0 else 0.0


def solve_sgd(psi: np.ndarray, target: np.ndarray, W: int, zeta: Optional[float] = None,
              radius: float = 100.0, g0: Optional[np.ndarray] = None, return_last: bool = False):
    """Average of W projected SGD iterates, one regression per agent.

    ``psi`` is (n_agents, D, P), ``target`` (n_agents, D) and ``g0`` (n_agents, P)
    the starting iterate (zero by default). Iterates stay in span{g0} plus
    the row space of each agent's score matrix, so the recursion runs on a
    scalar c and D coefficients u with g = c * g0 + psi^T u. This reproduces
    repeated ``sgd_step`` calls exactly at a fraction of the cost. Returns
    the (n_agents, P) average, and the last iterate too when ``return_last``.
    """
    psi = np.asarray(psi, dtype=float)
    if psi.ndim == 2:
        psi, target = psi[None], np.asarray(target)[None]
        g0 = None if g0 is None else np.asarray(g0)[None]
    n, D, P = psi.shape
    K = psi @ psi.transpose(0, 2, 1)
    if zeta is None:
        zetas = np.array([auto_zeta(K[i], D) for i in range(n)])
    else:
        zetas = np.full(n, float(zeta))
    if g0 is None:
        g0 = np.zeros((n, P))
    h = np.einsum("ndp,np->nd", psi, g0)
    n0 = np.einsum("np,np->n", g0, g0)
    c = np.ones(n)
    u = np.zeros((n, D))
    acc_c = np.zeros(n)
    acc_u = np.zeros((n, D))
    step = (2.0 * zetas / D)[:, None]
    for _ in range(W):
        u = u - step * (c[:, None] * h + np.einsum("nij,nj->ni", K, u) - target)
        Ku = np.einsum("nij,nj->ni", K, u)
        sq = c * c * n0 + 2 * c * np.einsum("ni,ni->n", u, h) + np.einsum("ni,ni->n", u, Ku)
        nrm = np.sqrt(np.maximum(sq, 0.0))
        over = nrm > radius
        if over.any():
            f = radius / nrm[over]
            u[over] *= f[:, None]
            c[over] *= f
        acc_c += c
        acc_u += u
    avg = (acc_c / W)[:, None] * g0 + np.einsum("nd,ndp->np", acc_u / W, psi)
    if not return_last:
        return avg
    return avg, c[:, None] * g0 + np.einsum("nd,ndp->np", u, psi)


def exact_rnpg(psi: np.ndarray, weights: np.ndarray, phi: np.ndarray, bias_grad: np.ndarray) -> np.ndarray:
    """Minimum-norm minimiser of the weighted regression, solved exactly.

    ``psi`` (K, P) lists all (s, a) score vectors, ``weights`` the matching
    d(s) pi(a|s), ``phi`` the residuals and ``bias_grad`` the vector
    gamma*delta/(1-gamma+gamma*delta) * grad min_s v. The bias enters through
    its score-weighted moment, so the normal equations read
    sum w psi psi^T g = sum w psi phi + bias_grad.
    """
    A = (psi * weights[:, None]).T @ psi
    rhs = psi.T @ (weights * phi) + bias_grad
    g, *_ = np.linalg.lstsq(A, rhs, rcond=1e-12)
    return g


def tabular_robust_gradient(mdp, pi: np.ndarray, psi: np.ndarray, s1: int) -> dict:
    """Robust policy gradient pieces for a softmax tabular policy.

    Returns the residuals, the unnormalised visitation from s1, the bias
    vector and grad v(s1), all from the robust policy-gradient identity
    grad v(s1) = sum_s d(s) sum_a pi psi phi + coef * grad v(s*).
    """
    g, d = mdp.gamma, mdp.delta
    v = mdp.robust_value(pi)
    s_star = int(np.argmin(v))
    q = mdp.robust_q(pi, v)
    phi = q - v[:, None]
    vis = mdp.visitation(pi)
    local = np.einsum("sa,sap,sa->sp", pi, psi, phi)
    A_from = vis @ local  # row s: sum_x vis[s, x] * local[x]
    coef = bias_coefficient(g, d)
    grad_vstar = A_from[s_star] / (1.0 - coef)
    bias = coef * grad_vstar
    return {
        "v": v, "phi": phi, "d": vis[s1], "s_star": s_star,
        "bias": bias, "grad_v": A_from[s1] + bias,
    }


# ------------------------------------------------------------ sampled route

class SamplingModel(Protocol):
    """What the sampled estimator needs from an environment + policy pair."""

    n_params: int

    def initial(self, rng: np.random.Generator) -> Any: ...

    def act(self, theta: np.ndarray, state: Any, rng: np.random.Generator,
            score: bool = True) -> tuple[Any, Optional[np.ndarray]]:
        """Sample a joint action; return it with per-agent scores (n_agents, n_params)."""

    def transition(self, state: Any, action: Any, rng: np.random.Generator) -> tuple[Any, float, float]: ...

    def features(self, state: Any) -> np.ndarray: ...


@dataclass
class Branch:
    """D one-step transitions from a common start s_T."""

    start: Any
    x: np.ndarray           # (D, n_feat) critic input at s_T (repeated)
    x_next: np.ndarray      # (D, n_feat)
    r: np.ndarray           # (D,)
    c: np.ndarray           # (D,)
    psi: np.ndarray         # (n_agents, D, P)
    next_states: list


@dataclass
class SampleGroup:
    s1: Any
    x1: np.ndarray
    horizon: int
    path: list = field(default_factory=list)  # (state, x, r, c, next_state, x_next)
    branch: Optional[Branch] = None


def collect_group(model: SamplingModel, theta: np.ndarray, gamma: float, delta: float, D: int,
                  rng: np.random.Generator, start: Any = None) -> SampleGroup:
    """Draw s1 (or use ``start``), roll to s_T with T ~ Geom(1-g+g*d), then branch D transitions."""
    s = model.initial(rng) if start is None else start
    T = sample_horizon(gamma, delta, rng)
    grp = SampleGroup(s, model.features(s), T)
    for _ in range(T - 1):
        a, _ = model.act(theta, s, rng, score=False)
        s2, r, c = model.transition(s, a, rng)
        grp.path.append((s, model.features(s), r, c, s2, model.features(s2)))
        s = s2
    xs = model.features(s)
    psis, rs, cs, nxt, xn = [], [], [], [], []
    for _ in range(D):
        a, psi = model.act(theta, s, rng)
        s2, r, c = model.transition(s, a, rng)
        psis.append(psi)
        rs.append(r)
        cs.append(c)
        nxt.append(s2)
        xn.append(model.features(s2))
    grp.branch = Branch(s, np.repeat(xs[None], D, axis=0), np.array(xn), np.array(rs, float),
                        np.array(cs, float), np.stack(psis, axis=1), nxt)
    return grp


def estimate_from_groups(groups: Sequence[SampleGroup], critic: RobustCritic, objective: str, W: int,
                         zeta: Optional[float] = None, radius: float = 100.0,
                         bias_dir: Optional[np.ndarray] = None, reward_fn=None, chain: bool = True) -> GradEstimate:
    """Average of all SGD iterates over groups and steps, then over agents.

    With ``chain`` each agent's iterate carries over from one group to the
    next, so the M*W iterates form one averaged SGD run on the regression;
    otherwise every group restarts from zero. ``objective`` selects the
    branch signal ('reward' uses r, 'cost' uses c); ``reward_fn(r, c)``
    overrides it, e.g. for a merged reward.
    """
    out = None
    last = None
    for grp in groups:
        br = grp.branch
        sig = _signal(br.r, br.c, objective, reward_fn)
        terms = residual_from_critic(sig, br.x, br.x_next, critic, bias_dir)
        target = regression_targets(br.psi, terms)
        avg, end = solve_sgd(br.psi, target, W, zeta, radius, g0=last if chain else None, return_last=True)
        last = end
        g = avg.mean(axis=0)
        out = g if out is None else out + g
    D = groups[0].branch.r.size if groups else 0
    return GradEstimate(out / len(groups), objective, len(groups), W, D)


def _signal(r, c, objective, reward_fn=None):
    if reward_fn is not None:
        return reward_fn(r, c)
    if objective == "reward":
        return r
    if objective == "cost":
        return c
    raise ValueError(f"unknown objective {objective!r}")


def estimate_rnpg(model: SamplingModel, theta: np.ndarray, critic: RobustCritic, objective: str,
                  M: int, W: int, D: int, rng: np.random.Generator, zeta: Optional[float] = None,
                  radius: float = 100.0, bias_samples: int = 0, reward_fn=None, chain: bool = True) -> GradEstimate:
    """Sampled robust natural gradient for one objective (see ``pinned_bias`` for the bias term)."""
    g, d = critic.gamma, critic.delta
    groups = [collect_group(model, theta, g, d, D, rng) for _ in range(M)]
    bias_dir = pinned_bias(model, theta, critic, objective, W, D, rng, bias_samples, zeta, radius, reward_fn, chain)
    return estimate_from_groups(groups, critic, objective, W, zeta, radius, bias_dir, reward_fn, chain)


def pinned_bias(model: SamplingModel, theta: np.ndarray, critic: RobustCritic, objective: str, W: int,
                D: int, rng: np.random.Generator, samples: int, zeta=None, radius: float = 100.0,
                reward_fn=None, chain: bool = True) -> Optional[np.ndarray]:
    """Bias direction beta added to the regression targets as psi . beta.

    beta = gamma*delta/(1-gamma) * (bias-free estimate started at the critic's
    argmin state s*). With c = gamma*delta/(1-gamma+gamma*delta), the natural
    gradient at s* satisfies g* = g*_0 + c g*, so c g* = c/(1-c) g*_0 and
    c/(1-c) = gamma*delta/(1-gamma). Exact when the Fisher matrices under the
    visitations from s* and from s1 coincide. None when delta == 0 or no
    samples are requested.
    """
    g, d = critic.gamma, critic.delta
    if d == 0.0 or samples <= 0:
        return None
    _, s_star = critic.min_value()
    pinned = [collect_group(model, theta, g, d, D, rng, start=s_star) for _ in range(samples)]
    est = estimate_from_groups(pinned, critic, objective, W, zeta, radius, None, reward_fn, chain)
    return g * d / (1.0 - g) * est.g_tilde
