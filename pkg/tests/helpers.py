"""Random game and profile generators shared by the tests."""

import numpy as np

from mfg_fsolve.model import model_from_dict
from mfg_fsolve.relaxed import RelaxedStrategyProfile, dirac_profile, uniform_grid


def _nonneg_poly(rng, d, scale=1.0):
    # nonnegative coefficients keep the polynomial nonnegative on the simplex
    return {
        "c": float(scale * rng.uniform(0.0, 1.0)),
        "lin": (scale * rng.uniform(0.0, 1.0, d) * (rng.random(d) < 0.5)).tolist(),
        "quad": (scale * rng.uniform(0.0, 0.5, (d, d)) * (rng.random((d, d)) < 0.3)).tolist(),
    }


def _signed_poly(rng, d, scale=1.0):
    return {
        "c": float(scale * rng.normal()),
        "lin": (scale * rng.normal(size=d)).tolist(),
        "quad": (0.5 * scale * rng.normal(size=(d, d))).tolist(),
    }


def _neg_sum(polys, d):
    return {
        "c": -sum(p["c"] for p in polys),
        "lin": (-np.sum([p["lin"] for p in polys], axis=0)).tolist() if polys else [0.0] * d,
        "quad": (-np.sum([p["quad"] for p in polys], axis=0)).tolist() if polys else [[0.0] * d] * d,
    }


def random_model_dict(rng, d=None, K=None, T=None):
    d = int(rng.integers(2, 4)) if d is None else d
    K = int(rng.integers(1, 4)) if K is None else K
    T = float(rng.uniform(0.5, 1.5)) if T is None else T
    labels = [f"u{k}" for k in range(K)]
    Q, g = {}, {}
    for lab in labels:
        rows = []
        for i in range(d):
            off = {j: _nonneg_poly(rng, d) for j in range(d) if j != i}
            rows.append([off[j] if j != i else _neg_sum(list(off.values()), d) for j in range(d)])
        Q[lab] = rows
        g[lab] = [_signed_poly(rng, d, 0.5) for _ in range(d)]
    sigma = [_signed_poly(rng, d, 0.5) for _ in range(d)]
    return {"name": "random", "d": d, "T": T, "controls": labels, "Q": Q, "g": g, "sigma": sigma}


def random_model(rng, d=None, K=None, T=None):
    return model_from_dict(random_model_dict(rng, d, K, T))


def random_simplex(rng, d):
    return rng.dirichlet(np.ones(d))


def random_dirac_profile(rng, model, t0, N, pieces=None):
    grid = uniform_grid(t0, model.horizon_T, N)
    if pieces is None:
        choices = rng.integers(0, model.K, size=(N, model.d))
    else:
        block = rng.integers(0, model.K, size=(pieces, model.d))
        choices = block[np.minimum(np.arange(N) * pieces // N, pieces - 1)]
    return dirac_profile(grid, choices, model.K)


def random_relaxed_profile(rng, model, t0, N, pieces=6):
    grid = uniform_grid(t0, model.horizon_T, N)
    block = rng.dirichlet(np.ones(model.K), size=(pieces, model.d))
    return RelaxedStrategyProfile(grid, block[np.minimum(np.arange(N) * pieces // N, pieces - 1)])
