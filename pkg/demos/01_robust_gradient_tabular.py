"""Robust values and the natural gradient on a five-state toy MDP.

Walks through what the robust critic and the gradient estimator compute,
using an MDP small enough to solve exactly:

  * robust values shrink as the contamination level delta grows;
  * the least-squares minimiser built from the robust TD residual (plus the
    worst-state bias term) equals the pseudo-inverse Fisher times the
    gradient of the robust value, checked here against a complex-step
    derivative.

Run:  python demos/01_robust_gradient_tabular.py
"""

import numpy as np

from rocoma.rnpg import exact_rnpg, tabular_robust_gradient
from rocoma.tabular import TabularMDP, softmax_policy, softmax_scores


def natural_gradient(mdp, pi, s1=0):
    """Exact regression minimiser and Fisher matrix for a softmax policy."""
    S, A = pi.shape
    psi = softmax_scores(pi)
    parts = tabular_robust_gradient(mdp, pi, psi, s1)
    w = (parts["d"][:, None] * pi).ravel()
    g = exact_rnpg(psi.reshape(S * A, -1), w, parts["phi"].ravel(), parts["bias"])
    F = np.einsum("s,sa,sap,saq->pq", parts["d"], pi, psi, psi)
    return g, F


def cs_grad(mdp, theta, s, h=1e-30):
    S, A = mdp.R.shape
    out = np.empty(theta.size)
    for k in range(theta.size):
        e = np.zeros(theta.size, complex)
        e[k] = 1j * h
        out[k] = mdp.robust_value(softmax_policy(theta + e, S, A))[s].imag / h
    return out


rng = np.random.default_rng(0)
S, A, gamma = 5, 2, 0.9
base = TabularMDP.random(S, A, gamma, 0.0, rng)
theta = rng.normal(size=S * A)
pi = softmax_policy(theta, S, A)

print("robust value of a fixed policy as delta grows")
for delta in (0.0, 0.05, 0.1, 0.3):
    mdp = TabularMDP(base.P, base.R, gamma, delta)
    v = mdp.robust_value(pi)
    print(f"  delta={delta:<5} v = {np.array2string(v, precision=2)}  worst state {int(np.argmin(v))}")

mdp = TabularMDP(base.P, base.R, gamma, 0.1)
g, F = natural_gradient(mdp, pi)
oracle = np.linalg.pinv(F) @ cs_grad(mdp, theta, 0)
print("\nnatural gradient at delta=0.1, start state 0")
print("  regression minimiser :", np.array2string(g, precision=4))
print("  pinv(F) @ grad v     :", np.array2string(oracle, precision=4))
print(f"  max abs difference   : {np.max(np.abs(g - oracle)):.2e}")

# A few natural-gradient ascent steps on the robust value of state 0.
print("\nnatural-gradient ascent on v(s=0), step 0.5")
for it in range(6):
    pi = softmax_policy(theta, S, A)
    v0 = mdp.robust_value(pi)[0]
    print(f"  step {it}: v(0) = {v0:.4f}")
    theta = theta + 0.5 * natural_gradient(mdp, pi)[0]
