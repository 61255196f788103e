"""Regenerates oracle.json with scipy optimisers that share no code with the crate."""
import json

import numpy as np
from scipy.optimize import minimize

rng = np.random.default_rng(20240917)
out = {"primal": [], "m_step": [], "pi_block": []}

# Profile log-EL through direct maximisation over the masses p.
for case in range(3):
    train = np.round(rng.normal(0.0, 1.0, 4), 6)
    test = np.round(rng.normal(0.6, 1.0, 4), 6)
    alpha, beta, pi = [(-0.3, 0.8, 0.4), (0.2, -1.1, 0.25), (-0.5, 1.5, 0.6)][case]
    x = np.concatenate([train, test])
    q = np.exp(alpha + beta * x) - 1.0
    n_total = len(x)
    cons = [
        {"type": "eq", "fun": lambda p: p.sum() - 1.0},
        {"type": "eq", "fun": lambda p, q=q: p @ q},
    ]
    res = minimize(
        lambda p: -np.log(p).sum(),
        np.full(n_total, 1.0 / n_total),
        jac=lambda p: -1.0 / p,
        constraints=cons,
        bounds=[(1e-12, 1.0)] * n_total,
        method="SLSQP",
        options={"ftol": 1e-15, "maxiter": 1000},
    )
    assert res.success, res.message
    test_term = np.log(1.0 + pi * (np.exp(alpha + beta * test) - 1.0)).sum()
    value = -res.fun + n_total * np.log(n_total) + test_term
    out["primal"].append(
        {"train": train.tolist(), "test": test.tolist(), "alpha": alpha, "beta": beta, "pi": pi,
         "profile_log_el": value, "masses": res.x.tolist()}
    )

# Weighted two-class logit objective of the M-step, K = 1, n = m = 6.
for case in range(2):
    train = np.round(rng.normal(0.0, 1.0, 6), 6)
    test = np.round(rng.normal(1.0, 1.0, 6), 6)
    w1 = np.round(rng.uniform(0.1, 0.9, 6), 6)
    x = np.concatenate([train, test])
    t1 = np.concatenate([np.zeros(6), w1])

    def neg_m(g):
        eta = g[0] + g[1] * x
        return -(t1 @ eta - np.logaddexp(0.0, eta).sum())

    def grad(g):
        eta = g[0] + g[1] * x
        r = t1 - 1.0 / (1.0 + np.exp(-eta))
        return -np.array([r.sum(), r @ x])

    res = minimize(neg_m, np.zeros(2), jac=grad, method="BFGS", options={"gtol": 1e-13})
    alpha_star, beta = res.x
    s1, s0 = w1.sum(), (1.0 - w1).sum()
    alpha = alpha_star - np.log(s1 / (6.0 + s0))
    out["m_step"].append(
        {"train": train.tolist(), "test": test.tolist(), "w1": w1.tolist(),
         "alpha_star": alpha_star, "alpha": alpha, "beta": beta}
    )

# pi block of the M-step objective with pi_1 held at 0.3 (K = 3).
sums = np.array([12.5, 7.25, 20.0, 10.25])
m = sums.sum()
res = minimize(
    lambda p: -(sums[[0, 2, 3]] @ np.log(p)) - sums[1] * np.log(0.3),
    np.full(3, 0.7 / 3),
    constraints=[{"type": "eq", "fun": lambda p: p.sum() - 0.7}],
    bounds=[(1e-9, 1.0)] * 3,
    method="SLSQP",
    options={"ftol": 1e-15},
)
out["pi_block"].append({"sums": sums.tolist(), "fixed_class": 1, "value": 0.3,
                        "pi_0": res.x[0], "pi_2": res.x[1], "pi_3": res.x[2]})

# Standalone multinomial logit on a training block, classes 0..2, scalar x.
counts = [12, 9, 9]
ys = np.repeat([0, 1, 2], counts)
xs = np.round(np.concatenate([rng.normal(mu, 1.0, c) for mu, c in zip([0.0, 1.0, -0.8], counts)]), 6)
onehot = np.eye(3)[ys]


def neg_ll(g):
    eta = np.column_stack([np.zeros_like(xs), g[0] + g[1] * xs, g[2] + g[3] * xs])
    lse = np.logaddexp.reduce(eta, axis=1)
    return -((onehot * eta).sum() - lse.sum())


res = minimize(neg_ll, np.zeros(4), method="BFGS", options={"gtol": 1e-12})
out["training_logit"] = {"x": xs.tolist(), "y": ys.tolist(), "coef": res.x.tolist()}

with open("oracle.json", "w") as f:
    json.dump(out, f, indent=2)
    f.write("\n")
