"""Small graphs and independent oracles shared by the tests."""

from __future__ import annotations

import numpy as np

from bcest import Factor, FactorGraph, FactorTag, GaussianNoise, StateBlockKey, StateKind

X = StateBlockKey("x", StateKind.SCALAR)


def unary(y, sigma=1.0, gid=None, key=X, mean=0.0):
    """Scalar factor ``y - x`` with an analytic Jacobian."""
    return Factor((key,), lambda v, y=y: np.array([y - v[0][0]]),
                  GaussianNoise([mean], [[sigma ** 2]]), FactorTag.STATE_PRIOR, gid,
                  lambda v: [-np.eye(1)])


def scalar_graph(ys, sigmas=None, x0=0.0, grouped=False):
    g = FactorGraph()
    g.add_state_block(X, [x0])
    sigmas = [1.0] * len(ys) if sigmas is None else sigmas
    for i, (y, s) in enumerate(zip(ys, sigmas)):
        g.add_factor(unary(float(y), s, i if grouped else None))
    return g


def em_gmm(x, k, iters=500):
    """Plain EM for a 1-D Gaussian mixture (test oracle only).

    Returns ``(weights, means, variances, responsibilities)``.
    """
    x = np.asarray(x, dtype=float)
    # spread the starting means across the data range
    means = np.quantile(x, (np.arange(k) + 0.5) / k)
    var = np.full(k, x.var() + 1e-12)
    w = np.full(k, 1.0 / k)
    for _ in range(iters):
        logp = (np.log(w) - 0.5 * np.log(2 * np.pi * var)
                - 0.5 * (x[:, None] - means) ** 2 / var)
        logp -= logp.max(1, keepdims=True)
        resp = np.exp(logp)
        resp /= resp.sum(1, keepdims=True)
        nk = resp.sum(0)
        w = nk / nk.sum()
        means = (resp * x[:, None]).sum(0) / nk
        var = (resp * (x[:, None] - means) ** 2).sum(0) / nk + 1e-12
    return w, means, var, resp


def em_loglik(x, w, means, var):
    x = np.asarray(x, dtype=float)
    p = (w / np.sqrt(2 * np.pi * var) * np.exp(-0.5 * (x[:, None] - means) ** 2 / var)).sum(1)
    return float(np.log(p).sum())
