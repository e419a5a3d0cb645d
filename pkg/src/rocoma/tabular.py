"""Finite MDPs with softmax policies, for exact robust quantities.

Used as the small, fully enumerable setting where robust values, robust
policy gradients and natural gradients can be computed in closed form and
compared against the sampled machinery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class TabularMDP:
    P: np.ndarray  # (S, A, S) centroid kernel
    R: np.ndarray  # (S, A) reward
    gamma: float
    delta: float = 0.0

    def __post_init__(self):
        self.P = np.asarray(self.P)
        self.R = np.asarray(self.R)
        S, A, S2 = self.P.shape
        if S != S2 or self.R.shape != (S, A):
            raise ValueError("inconsistent MDP shapes")
        if not np.allclose(self.P.sum(axis=2), 1.0):
            raise ValueError("kernel rows must sum to one")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @classmethod
    def random(cls, S: int, A: int, gamma: float, delta: float, rng: np.random.Generator) -> "TabularMDP":
        P = rng.random((S, A, S)) ** 3
        P /= P.sum(axis=2, keepdims=True)
        return cls(P, rng.standard_normal((S, A)), gamma, delta)

    def policy_kernel(self, pi: np.ndarray) -> np.ndarray:
        return np.einsum("sa,sat->st", pi, self.P)

    def policy_reward(self, pi: np.ndarray) -> np.ndarray:
        return (pi * self.R).sum(axis=1)

    def robust_bellman(self, v: np.ndarray, pi: np.ndarray) -> np.ndarray:
        """(Tv)(s) = sum_a pi(a|s) [r + g*d*min v + g*(1-d) * sum_s' p(s'|s,a) v(s')]."""
        g, d = self.gamma, self.delta
        vmin = v[np.argmin(v.real)]
        return self.policy_reward(pi) + g * d * vmin + g * (1 - d) * self.policy_kernel(pi) @ v

    def robust_value(self, pi: np.ndarray) -> np.ndarray:
        """Exact fixed point of ``robust_bellman``.

        With w = (I - g(1-d)P_pi)^-1 r_pi the fixed point is
        w + g*d/(1-g) * min(w), and the minimising state is argmin w.
        Works with complex inputs (argmin taken on the real part).
        """
        g, d = self.gamma, self.delta
        S = self.n_states
        w = np.linalg.solve(np.eye(S) - g * (1 - d) * self.policy_kernel(pi), self.policy_reward(pi))
        return w + g * d / (1 - g) * w[np.argmin(w.real)]

    def visitation(self, pi: np.ndarray) -> np.ndarray:
        """Row s1 holds sum_k (g(1-d))^k Pr(s_k = s | s1); rows sum to 1/(1-g+g*d)."""
        g, d = self.gamma, self.delta
        return np.linalg.inv(np.eye(self.n_states) - g * (1 - d) * self.policy_kernel(pi))

    def robust_q(self, pi: np.ndarray, v: Optional[np.ndarray] = None) -> np.ndarray:
        g, d = self.gamma, self.delta
        v = self.robust_value(pi) if v is None else v
        return self.R + g * d * v.min() + g * (1 - d) * self.P @ v


def softmax_policy(theta: np.ndarray, S: int, A: int) -> np.ndarray:
    z = np.asarray(theta).reshape(S, A)
    z = z - z.real.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_scores(pi: np.ndarray) -> np.ndarray:
    """psi[s, a] = grad_theta log pi(a|s) as flat (S*A,) vectors; shape (S, A, S*A)."""
    S, A = pi.shape
    psi = np.zeros((S, A, S * A))
    for s in range(S):
        for a in range(A):
            psi[s, a, s * A:(s + 1) * A] = -pi[s]
            psi[s, a, s * A + a] += 1.0
    return psi
