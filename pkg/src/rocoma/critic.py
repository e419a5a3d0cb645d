"""Worst-case value estimation under delta-contamination.

The robust value is the fixed point of

    v(s) = E[r + gamma * delta * min_s v + gamma * (1 - delta) * v(s')].

Writing v = w + k * min w with k = gamma*delta / (1 - gamma), the fixed
point is reached by plain TD on w with discount gamma*(1 - delta); the
worst state of v is the worst state of w. Fitting w instead of v keeps
the batch minimum out of the regression target, which otherwise feeds
approximation noise back into every value (amplified by k, about 5 for
the default constants). In the tabular case with expected transitions
each epoch is one step of value iteration on w.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .nn import Adam, Mlp


class CriticDivergence(RuntimeError):
    pass


class CriticNotFitted(RuntimeError):
    pass


def robust_td_target(r, v_next, v_min, gamma: float, delta: float):
    return r + gamma * delta * v_min + gamma * (1.0 - delta) * v_next


def min_lift(gamma: float, delta: float) -> float:
    """k in v = w + k * min w."""
    return gamma * delta / (1.0 - gamma)


@dataclass
class TransitionBatch:
    x: np.ndarray
    r: np.ndarray
    x_next: np.ndarray
    w: Optional[np.ndarray] = None
    # opaque state objects aligned with x / x_next, used to report the argmin state
    states: Optional[Sequence[Any]] = None
    next_states: Optional[Sequence[Any]] = None


class MlpApprox:
    """Scalar Mlp value with a fixed output scale (identity output layer)."""

    def __init__(self, n_in: int, hidden: int = 32, scale: float = 1.0):
        self.mlp = Mlp(n_in, 1, hidden, positive_output=False)
        self.n_params = self.mlp.n_params
        self.scale = scale

    def init(self, rng):
        return self.mlp.init(rng)

    def forward(self, theta, X):
        return self.scale * self.mlp.forward(theta, np.atleast_2d(X))[:, 0]

    def grad(self, theta, X, g_out):
        _, cache = self.mlp.forward(theta, np.atleast_2d(X), cache=True)
        return self.scale * self.mlp.backward(theta, cache, g_out[:, None])


class TableApprox:
    """Lookup table indexed by integer state ids."""

    def __init__(self, n_states: int):
        self.n_params = n_states

    def init(self, rng):
        return np.zeros(self.n_params)

    def forward(self, theta, X):
        return theta[np.asarray(X, dtype=np.int64).ravel()]

    def grad(self, theta, X, g_out):
        return np.bincount(np.asarray(X, dtype=np.int64).ravel(), weights=g_out, minlength=self.n_params)


class RobustCritic:
    def __init__(self, approx, gamma: float, delta: float, lr: float = 1e-3,
                 rng: Optional[np.random.Generator] = None, inner_steps: int = 1):
        self.approx = approx
        self.gamma, self.delta = gamma, delta
        self.lr = lr
        self.inner_steps = inner_steps
        self.theta = approx.init(np.random.default_rng(0) if rng is None else rng)
        self.opt = Adam(approx.n_params, lr=lr)
        self.w_min: Optional[float] = None
        self.v_min: Optional[float] = None
        self.argmin_state: Any = None
        self.argmin_x: Optional[np.ndarray] = None

    @property
    def lift(self) -> float:
        return min_lift(self.gamma, self.delta)

    def w(self, x) -> np.ndarray:
        return self.approx.forward(self.theta, x)

    def value(self, x) -> np.ndarray:
        if self.delta == 0.0:
            return self.w(x)
        if self.w_min is None:
            raise CriticNotFitted("critic not fitted")
        return self.w(x) + self.lift * self.w_min

    def min_value(self) -> tuple[float, Any]:
        if self.v_min is None:
            raise CriticNotFitted("critic not fitted")
        return self.v_min, self.argmin_state

    def _refresh_min(self, batch: TransitionBatch):
        X = np.concatenate([np.atleast_2d(batch.x), np.atleast_2d(batch.x_next)]) \
            if np.ndim(batch.x) > 1 else np.concatenate([np.ravel(batch.x), np.ravel(batch.x_next)])
        w = self.w(X)
        k = int(np.argmin(w))  # first occurrence on ties
        self.w_min = float(w[k])
        self.v_min = (1.0 + self.lift) * self.w_min
        self.argmin_x = X[k]
        objs = None
        if batch.states is not None and batch.next_states is not None:
            objs = list(batch.states) + list(batch.next_states)
        self.argmin_state = objs[k] if objs is not None else X[k]

    def fit(self, batch: TransitionBatch, epochs: int = 2000, tol: Optional[float] = None) -> "RobustCritic":
        """Fit on one batch of on-policy transitions; returns self.

        Each epoch freezes the target r + gamma*(1-delta)*w(s'), then takes
        ``inner_steps`` Adam steps on the weighted squared error. Stops early
        once the target moves by less than ``tol`` in sup-norm between epochs.
        """
        n = len(batch.r)
        wt = np.ones(n) if batch.w is None else np.asarray(batch.w, dtype=float)
        wt = wt / wt.sum()
        r = np.asarray(batch.r, dtype=float)
        disc = self.gamma * (1.0 - self.delta)
        prev = None
        for _ in range(epochs):
            target = r + disc * self.w(batch.x_next)
            for _ in range(self.inner_steps):
                err = self.w(batch.x) - target
                loss = float(wt @ err ** 2)
                if not np.isfinite(loss):
                    raise CriticDivergence("critic divergence: decrease the critic learning rate")
                self.theta = self.opt.step(self.theta, self.approx.grad(self.theta, batch.x, 2 * wt * err))
            if tol is not None and prev is not None and np.max(np.abs(target - prev)) < tol:
                break
            prev = target
        if not np.isfinite(self.theta).all():
            raise CriticDivergence("critic divergence: decrease the critic learning rate")
        self._refresh_min(batch)
        return self

    def state(self) -> dict:
        return {"theta": self.theta.copy(), **{f"adam_{k}": v for k, v in self.opt.state().items()}}

    def load(self, st: dict):
        self.theta = np.array(st["theta"], dtype=float)
        self.opt.load({"m": st["adam_m"], "v": st["adam_v"], "k": st["adam_k"]})
