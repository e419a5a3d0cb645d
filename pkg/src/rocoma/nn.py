"""Small function approximators with explicit gradients.

Two-hidden-layer perceptrons on a flat parameter vector, a Dirichlet policy
head over each region's neighbourhood, an Adam optimiser and a binary
checkpoint container. Everything is plain numpy; per-sample gradients are
formed with einsum so a whole batch of agents is handled at once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import digamma, expit, gammaln

from .core import Grid, JointState, N_SLOTS, RebalanceAction

CONC_FLOOR = 1e-3
ACTION_EPS = 1e-6


def softplus(x):
    return np.logaddexp(0.0, x)


class Mlp:
    """input -> hidden -> hidden -> output, Softplus on hidden layers.

    The output layer is Softplus when ``positive_output`` is set and identity
    otherwise. Parameters are one flat vector laid out layer by layer as
    (W row-major, then b).
    """

    def __init__(self, n_in: int, n_out: int, hidden: int = 32, positive_output: bool = True):
        self.sizes = (n_in, hidden, hidden, n_out)
        self.positive_output = positive_output
        self.shapes = [(self.sizes[k], self.sizes[k + 1]) for k in range(3)]
        self.n_params = sum((a + 1) * b for a, b in self.shapes)

    def init(self, rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
        return rng.uniform(-scale, scale, size=self.n_params)

    def unpack(self, theta: np.ndarray):
        theta = np.asarray(theta)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        out, k = [], 0
        for a, b in self.shapes:
            W = theta[k:k + a * b].reshape(a, b)
            k += a * b
            out.append((W, theta[k:k + b]))
            k += b
        return out

    def forward(self, theta: np.ndarray, x: np.ndarray, cache: bool = False):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.shape[1] != self.sizes[0]:
            raise ValueError(f"input size {X.shape[1]} != {self.sizes[0]}")
        (W1, b1), (W2, b2), (W3, b3) = self.unpack(theta)
        z1 = X @ W1 + b1
        h1 = softplus(z1)
        z2 = h1 @ W2 + b2
        h2 = softplus(z2)
        z3 = h2 @ W3 + b3
        y = softplus(z3) if self.positive_output else z3
        if cache:
            return y, (X, z1, h1, z2, h2, z3)
        return y[0] if single else y

    def backward(self, theta: np.ndarray, cache, g_out: np.ndarray, per_sample: bool = False) -> np.ndarray:
        """Gradient of sum(g_out * y) with respect to theta.

        With ``per_sample`` the result has one row per input row.
        """
        X, z1, h1, z2, h2, z3 = cache
        (_, _), (W2, _), (W3, _) = self.unpack(theta)
        d3 = g_out * expit(z3) if self.positive_output else g_out
        d2 = (d3 @ W3.T) * expit(z2)
        d1 = (d2 @ W2.T) * expit(z1)
        if per_sample:
            parts = []
            for inp, d in ((X, d1), (h1, d2), (h2, d3)):
                parts.append(np.einsum("ni,nj->nij", inp, d).reshape(len(X), -1))
                parts.append(d)
            return np.concatenate(parts, axis=1)
        parts = []
        for inp, d in ((X, d1), (h1, d2), (h2, d3)):
            parts.append((inp.T @ d).ravel())
            parts.append(d.sum(axis=0))
        return np.concatenate(parts)


# ----------------------------------------------------------------- encoders

def local_features(s: JointState, fleet_size: int) -> np.ndarray:
    """Per-region policy input: normalised counts, time of day, grid position."""
    n = s.n_regions
    per_region = fleet_size / n
    phase = 2 * np.pi * (s.t % 288) / 288
    rows = np.arange(n) // s.cols
    cols = np.arange(n) % s.cols
    cmax = max(int(s.C.max()), 1)
    return np.column_stack([
        s.V / per_region,
        s.L / per_region,
        s.D / per_region,
        s.E / np.maximum(s.C, 1),
        s.C / cmax,
        np.full(n, np.sin(phase)),
        np.full(n, np.cos(phase)),
        rows / max(s.rows - 1, 1),
        cols / max(s.cols - 1, 1),
    ])


N_LOCAL_FEATURES = 9


def joint_features(s: JointState, fleet_size: int) -> np.ndarray:
    """Centralised critic input: every region's normalised counts plus time of day."""
    per_region = fleet_size / s.n_regions
    phase = 2 * np.pi * (s.t % 288) / 288
    return np.concatenate([
        s.V / per_region, s.L / per_region, s.D / per_region,
        s.E / np.maximum(s.C, 1), [np.sin(phase), np.cos(phase)],
    ])


def n_joint_features(n_regions: int) -> int:
    return 4 * n_regions + 2


# ------------------------------------------------------------------ Dirichlet

def sample_dirichlet(alpha: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise Dirichlet draws over the masked slots.

    Works in log space (Gamma(a) = Gamma(a+1) * U^(1/a)) so very small
    concentrations do not underflow to an all-zero row.
    """
    alpha = np.where(mask, alpha, 1.0)
    g = np.log(rng.gamma(alpha + 1.0)) + np.log(rng.random(alpha.shape)) / alpha
    g = np.where(mask, g, -np.inf)
    g -= g.max(axis=1, keepdims=True)
    x = np.where(mask, np.exp(g), 0.0)
    return x / x.sum(axis=1, keepdims=True)


def clamp_simplex(a: np.ndarray, mask: np.ndarray, eps: float = ACTION_EPS) -> np.ndarray:
    a = np.where(mask, np.clip(a, eps, 1 - eps), 0.0)
    return a / a.sum(axis=1, keepdims=True)


def dirichlet_logpdf(x: np.ndarray, alpha: np.ndarray, mask: np.ndarray) -> np.ndarray:
    a = np.where(mask, alpha, 0.0)
    logx = np.where(mask, np.log(np.where(mask, x, 1.0)), 0.0)
    return (gammaln(a.sum(axis=1)) - np.where(mask, gammaln(np.where(mask, alpha, 1.0)), 0.0).sum(axis=1)
            + ((a - 1.0) * logx).sum(axis=1))


def dirichlet_dlogpdf_dalpha(x: np.ndarray, alpha: np.ndarray, mask: np.ndarray) -> np.ndarray:
    a = np.where(mask, alpha, 0.0)
    logx = np.log(np.where(mask, x, 1.0))
    g = digamma(a.sum(axis=1, keepdims=True)) - digamma(np.where(mask, alpha, 1.0)) + logx
    return np.where(mask, g, 0.0)


class DirichletPolicy:
    """Shared per-region policy: local features -> two Dirichlet heads.

    Output units [0:5] parameterise the vacant-EV split and [5:10] the
    low-battery split over the neighbour slots (self, up, down, left, right).
    """

    def __init__(self, grid: Grid, fleet_size: int, hidden: int = 32):
        self.grid = grid
        self.fleet_size = fleet_size
        self.mlp = Mlp(N_LOCAL_FEATURES, 2 * N_SLOTS, hidden, positive_output=True)
        self.n_params = self.mlp.n_params

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return self.mlp.init(rng)

    def features(self, s: JointState) -> np.ndarray:
        return local_features(s, self.fleet_size)

    def concentrations(self, theta, x, cache: bool = False):
        out = self.mlp.forward(theta, x, cache=cache)
        if cache:
            y, c = out
            return y + CONC_FLOOR, c
        return out + CONC_FLOOR

    def sample(self, theta, x, rng, mask=None):
        """Draw (a_v, a_l, logp) for every agent row of ``x``."""
        mask = self.grid.mask if mask is None else mask
        alpha = self.concentrations(theta, x)
        a_v = clamp_simplex(sample_dirichlet(alpha[:, :N_SLOTS], mask, rng), mask)
        a_l = clamp_simplex(sample_dirichlet(alpha[:, N_SLOTS:], mask, rng), mask)
        return a_v, a_l, self._logp(alpha, a_v, a_l, mask)

    @staticmethod
    def _logp(alpha, a_v, a_l, mask):
        return dirichlet_logpdf(a_v, alpha[:, :N_SLOTS], mask) + dirichlet_logpdf(a_l, alpha[:, N_SLOTS:], mask)

    def log_prob(self, theta, x, a_v, a_l, mask=None) -> np.ndarray:
        mask = self.grid.mask if mask is None else mask
        a_v, a_l = clamp_simplex(a_v, mask), clamp_simplex(a_l, mask)
        return self._logp(self.concentrations(theta, x), a_v, a_l, mask)

    def score(self, theta, x, a_v, a_l, mask=None) -> np.ndarray:
        """Per-agent score vectors grad_theta log pi_i(a_i | s_i), shape (n_agents, n_params)."""
        mask = self.grid.mask if mask is None else mask
        a_v, a_l = clamp_simplex(a_v, mask), clamp_simplex(a_l, mask)
        alpha, cache = self.concentrations(theta, x, cache=True)
        g = np.concatenate([
            dirichlet_dlogpdf_dalpha(a_v, alpha[:, :N_SLOTS], mask),
            dirichlet_dlogpdf_dalpha(a_l, alpha[:, N_SLOTS:], mask),
        ], axis=1)
        return self.mlp.backward(theta, cache, g, per_sample=True)

    def mean_action(self, theta, x, mask=None):
        mask = self.grid.mask if mask is None else mask
        alpha = np.where(np.tile(mask, 2), self.concentrations(theta, x), 0.0)
        a_v = alpha[:, :N_SLOTS] / alpha[:, :N_SLOTS].sum(axis=1, keepdims=True)
        a_l = alpha[:, N_SLOTS:] / alpha[:, N_SLOTS:].sum(axis=1, keepdims=True)
        return a_v, a_l


class PolicyActor:
    """Binds a DirichletPolicy to parameters so it can drive ``sim.rollout``."""

    def __init__(self, policy: DirichletPolicy, theta: np.ndarray, greedy: bool = False):
        self.policy = policy
        self.theta = theta
        self.greedy = greedy

    def act(self, s: JointState, rng: np.random.Generator) -> RebalanceAction:
        x = self.policy.features(s)
        if self.greedy:
            a_v, a_l = self.policy.mean_action(self.theta, x)
        else:
            a_v, a_l, _ = self.policy.sample(self.theta, x, rng)
        return RebalanceAction(a_v, a_l)


# ---------------------------------------------------------------------- Adam

class Adam:
    def __init__(self, n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.k = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return updated parameters for minimising along ``grad``."""
        self.k += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.k)
        vhat = self.v / (1 - self.beta2 ** self.k)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "k": self.k}

    def load(self, st: dict):
        self.m, self.v, self.k = np.array(st["m"]), np.array(st["v"]), int(st["k"])


# -------------------------------------------------------------- checkpoints
#
# Layout: b"ROCOMA-CKPT\n", then a decimal header length and b"\n", then a
# UTF-8 JSON header {"version", "arrays": [{"name", "shape", "offset"}], "meta"},
# then the payload of all arrays as contiguous little-endian float64.

MAGIC = b"ROCOMA-CKPT\n"
CKPT_VERSION = 1


def save_container(path, arrays: dict, meta: Optional[dict] = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.array(arr, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"version": CKPT_VERSION, "arrays": entries, "meta": meta or {}}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(header)}\n".encode())
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_container(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint container")
        n = int(fh.readline().decode().strip())
        header = json.loads(fh.read(n).decode())
        if header.get("version") != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported container version {header.get('version')}")
        payload = fh.read()
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(tuple(e["shape"])).astype(float)
    return arrays, header["meta"]
