"""Value clouds: backward attainability sampling and forward cross-validation.

A backward sample fixes a terminal population ``m_T``, a strategy profile
and a terminal representative-player law ``mu_T``, integrates the coupled
system backward from ``(m_T, sigma(m_T), mu_T, z = 0)`` and keeps
``phi(t0)`` whenever the sample lands on the query: ``m(t0)`` near ``m0``,
``mu(t0)`` near the uniform law and ``z(t0)`` near zero.

Two control generators are mixed half and half:

* ``macro``: one random slice per macro time block and state (a Dirac with
  probability 3/4, otherwise a Dirichlet mixture);
* ``feedback``: on every step the best response at the right endpoint of the
  step, ties broken at random.  These samples stay close to the equilibrium
  manifold, where ``z`` is nearly conserved.

``mu_T`` is drawn by pushing a random law near the uniform one forward along
the sampled flow; any ``mu_T`` in the simplex is admissible, this choice only
concentrates the samples where the ``mu`` filter can pass.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from ._parallel import parallel_map
from .dynamics import _m_mid, _mu_mid, _mu_propagators, _phi_mid, _z_increments, integrate_forward_m
from .model import SIMPLEX_EPS, GameModel, as_simplex, features, uniform
from .relaxed import RelaxedStrategyProfile, optimality_gaps, uniform_grid
from .solver import SolveOptions, multi_start_solve

CHUNK = 2048
DEDUP_TOL = 1e-4
N_MISSES = 10
BACKWARD = "backward-sample"
FORWARD = "forward-solve"


@dataclass(frozen=True)
class SampleOptions:
    samples: int = 100_000
    macro_K: int = 8
    seed: int = 0
    tol_m: float = 5e-2
    tol_mu: float = 5e-2
    tol_z: float = 1e-3
    steps: int = 200
    feedback_share: float = 0.5
    condition_mu: bool = True
    mu_radius: float | None = None  # radius of the mu(t0) ball; defaults to tol_mu

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(eq=False)
class CloudPoint:
    phi0: np.ndarray
    dist_m: float
    dist_mu: float
    z_abs: float
    source: str = BACKWARD
    profile: RelaxedStrategyProfile | None = None
    m_T: np.ndarray | None = None
    m_start: np.ndarray | None = None
    certificate: object = None

    def to_dict(self) -> dict:
        out = {"phi0": self.phi0.tolist(), "dist_m": self.dist_m, "dist_mu": self.dist_mu,
               "z_abs": self.z_abs, "source": self.source}
        if self.m_T is not None:
            out["m_T"] = self.m_T.tolist()
        if self.certificate is not None:
            out["certificate"] = self.certificate.to_dict()
        return out


@dataclass(eq=False)
class ValueCloud:
    t0: float
    m0: np.ndarray
    points: list = field(default_factory=list)
    tolerances: dict = field(default_factory=dict)
    n_samples: int = 0
    n_valid: int = 0
    nearest_misses: list = field(default_factory=list)

    @property
    def phis(self) -> np.ndarray:
        if not self.points:
            return np.empty((0, len(self.m0)))
        return np.array([p.phi0 for p in self.points])

    def nearest(self, phi0) -> float:
        """Sup-norm distance from ``phi0`` to the closest cloud point (``inf`` when empty)."""
        if not self.points:
            return float("inf")
        return float(np.min(np.max(np.abs(self.phis - np.asarray(phi0)), axis=1)))


# ---------------------------------------------------------------------------
# batched backward integration


def _random_macro(rng, B, steps, d, K, pieces):
    pieces = max(1, min(pieces, steps))
    dirac = rng.random((B, pieces, d)) < 0.75
    choice = rng.integers(K, size=(B, pieces, d))
    mix = rng.dirichlet(np.ones(K), size=(B, pieces, d))
    w = np.where(dirac[..., None], np.eye(K)[choice], mix)
    idx = np.minimum(np.arange(steps) * pieces // steps, pieces - 1)
    return np.moveaxis(w[:, idx], 1, 0)  # (steps, B, d, K)


def _drift(model, m, phi, w):
    f = features(m)
    B, K, d = m.shape[0], model.K, model.d
    R = (f @ model._q_flat).reshape(B, K, d, d)
    G = (f @ model._g_flat).reshape(B, K, d)
    A = np.sum(np.swapaxes(w, 1, 2)[..., None] * R, axis=1)
    dm = np.matmul(m[:, None, :], A)[:, 0]
    H = (np.matmul(R, phi[:, None, :, None])[..., 0] + G).max(axis=1)
    return dm, -H


def _feedback_slice(model, m, phi, rng):
    ties = optimality_gaps(model, m, phi) == 0.0  # (B, d, K)
    key = ties + 0.5 * rng.random(ties.shape)
    return np.eye(model.K)[np.argmax(key, axis=-1)]


def _simplex_uniform(rng, size, d):
    return rng.dirichlet(np.ones(d), size=size)


def _tangent_ball(rng, B, d, radius):
    if d == 1 or radius == 0.0:
        return np.zeros((B, d))
    v = rng.standard_normal((B, d))
    v -= v.mean(axis=1, keepdims=True)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.random(B) ** (1.0 / (d - 1))
    return v * r[:, None]


def _sample_chunk(chunk, model, t0, m0, opts, B):
    """Integrate ``B`` samples; returns per-sample arrays (no filtering)."""
    rng = np.random.default_rng([opts.seed, chunk])
    d, K, S = model.d, model.K, opts.steps
    grid = uniform_grid(t0, model.horizon_T, S)
    h = np.diff(grid)
    mode_feedback = rng.random(B) < opts.feedback_share
    macro = _random_macro(rng, B, S, d, K, opts.macro_K)
    m_T = _simplex_uniform(rng, B, d)

    m = np.empty((S + 1, B, d))
    phi = np.empty((S + 1, B, d))
    w = np.empty((S, B, d, K))
    m[S], phi[S] = m_T, model.terminal(m_T)
    valid = np.ones(B, dtype=bool)
    with np.errstate(all="ignore"):
        for n in range(S - 1, -1, -1):
            y, p, hn = m[n + 1], phi[n + 1], -h[n]
            fb = _feedback_slice(model, y, p, rng)
            wn = np.where(mode_feedback[:, None, None], fb, macro[n])
            w[n] = wn
            k1m, k1p = _drift(model, y, p, wn)
            k2m, k2p = _drift(model, y + 0.5 * hn * k1m, p + 0.5 * hn * k1p, wn)
            k3m, k3p = _drift(model, y + 0.5 * hn * k2m, p + 0.5 * hn * k2p, wn)
            k4m, k4p = _drift(model, y + hn * k3m, p + hn * k3p, wn)
            m[n] = y + hn / 6.0 * (k1m + 2 * k2m + 2 * k3m + k4m)
            phi[n] = p + hn / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
            # samples that left the simplex are frozen so they cannot overflow
            bad = ~np.all(np.isfinite(m[n]) & np.isfinite(phi[n]) & (m[n] >= -SIMPLEX_EPS), axis=-1)
            if bad.any():
                valid &= ~bad
                m[n, bad] = m[n + 1, bad]
                phi[n, bad] = phi[n + 1, bad]

        hb = h[:, None, None]
        m_mid = _m_mid(model, w, hb, m)
        theta = uniform(d)
        radius = opts.tol_mu if opts.mu_radius is None else opts.mu_radius
        if opts.condition_mu:
            mu_start = theta + _tangent_ball(rng, B, d, radius)
            mu_start = np.maximum(mu_start, 0.0)
            mu_start /= mu_start.sum(axis=1, keepdims=True)
            P = _mu_propagators(model, w, h[:, None], m, m_mid)
            mu_T = mu_start
            for n in range(S):
                mu_T = np.matmul(mu_T[:, None, :], P[n])[:, 0]
            mu_T = np.maximum(mu_T, 0.0)
            mu_T /= mu_T.sum(axis=1, keepdims=True)
        else:
            mu_T = _simplex_uniform(rng, B, d)
        Pb = _mu_propagators(model, w, h[:, None], m, m_mid, backward=True)
        mu = np.empty((S + 1, B, d))
        mu[S] = mu_T
        for n in range(S - 1, -1, -1):
            mu[n] = np.matmul(mu[n + 1][:, None, :], Pb[n])[:, 0]
        mu_ok = np.all(mu >= -SIMPLEX_EPS, axis=(0, 2))

        inc = _z_increments(model, w, hb, m, phi, mu, m_mid, _phi_mid(model, hb, m, phi),
                            _mu_mid(model, w, hb, m, mu))
        z0 = -inc.sum(axis=0)

    dist_m = np.linalg.norm(m[0] - m0, axis=1)
    dist_mu = np.linalg.norm(mu[0] - theta, axis=1)
    return {
        "phi0": phi[0], "dist_m": dist_m, "dist_mu": dist_mu, "z0": z0, "valid": valid, "mu_ok": mu_ok,
        "m_T": m_T, "m_start": m[0], "weights": np.moveaxis(w, 1, 0), "feedback": mode_feedback,
    }


def _chunks(opts: SampleOptions):
    sizes = [CHUNK] * (opts.samples // CHUNK)
    if opts.samples % CHUNK:
        sizes.append(opts.samples % CHUNK)
    return list(enumerate(sizes))


def _run_chunk(item, model, t0, m0, opts):
    chunk, B = item
    return _sample_chunk(chunk, model, t0, m0, opts, B)


def sample_backward(model: GameModel, t0: float, m0, opts: SampleOptions, jobs: int | None = None):
    """Raw per-sample arrays concatenated over all chunks, in chunk order."""
    if not t0 < model.horizon_T:
        raise ValueError(f"initial time {t0} must be before the horizon {model.horizon_T}")
    m0 = as_simplex(m0, model.d, "m0")
    run = functools.partial(_run_chunk, model=model, t0=t0, m0=m0, opts=opts)
    parts = parallel_map(run, _chunks(opts), jobs)
    if not parts:
        return None
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def _normalized(dist_m, dist_mu, z_abs, opts):
    def ratio(x, tol):
        return np.where(x == 0.0, 0.0, x / tol) if tol > 0 else np.where(x == 0.0, 0.0, np.inf)
    return np.maximum(np.maximum(ratio(dist_m, opts.tol_m), ratio(dist_mu, opts.tol_mu)), ratio(z_abs, opts.tol_z))


def backward_sample(model: GameModel, t0: float, m0, opts: SampleOptions | None = None,
                    jobs: int | None = None) -> ValueCloud:
    opts = opts or SampleOptions()
    m0 = as_simplex(m0, model.d, "m0")
    raw = sample_backward(model, t0, m0, opts, jobs)
    cloud = ValueCloud(t0=float(t0), m0=m0, tolerances=opts.as_dict(), n_samples=opts.samples)
    if raw is None:
        return cloud
    valid = raw["valid"] & raw["mu_ok"]
    cloud.n_valid = int(valid.sum())
    z_abs = np.abs(raw["z0"])
    accept = valid & (raw["dist_m"] <= opts.tol_m) & (raw["dist_mu"] <= opts.tol_mu) & (z_abs <= opts.tol_z)
    score = _normalized(raw["dist_m"], raw["dist_mu"], z_abs, opts)

    grid = uniform_grid(t0, model.horizon_T, opts.steps)
    kept: list[int] = []
    for i in np.flatnonzero(accept)[np.argsort(score[accept], kind="stable")]:
        if all(np.max(np.abs(raw["phi0"][i] - raw["phi0"][j])) >= DEDUP_TOL for j in kept):
            kept.append(int(i))
    for i in kept:
        cloud.points.append(CloudPoint(
            phi0=raw["phi0"][i].copy(), dist_m=float(raw["dist_m"][i]), dist_mu=float(raw["dist_mu"][i]),
            z_abs=float(z_abs[i]), source=BACKWARD, profile=RelaxedStrategyProfile(grid, raw["weights"][i]),
            m_T=raw["m_T"][i].copy(), m_start=raw["m_start"][i].copy()))
    cloud.points.sort(key=lambda p: tuple(p.phi0))

    miss = np.flatnonzero(valid & ~accept)
    for i in miss[np.argsort(score[miss], kind="stable")][:N_MISSES]:
        cloud.nearest_misses.append({
            "phi0": raw["phi0"][i].tolist(), "dist_m": float(raw["dist_m"][i]),
            "dist_mu": float(raw["dist_mu"][i]), "z_abs": float(z_abs[i]), "score": float(score[i])})
    return cloud


def forward_check(model: GameModel, point: CloudPoint) -> float:
    """Re-integrate an accepted sample forward from its own ``m(t0)``; returns the terminal mismatch."""
    if point.profile is None:
        raise ValueError("point carries no profile")
    t0 = float(point.profile.time_grid[0])
    start = np.maximum(point.m_start, 0.0)
    m = integrate_forward_m(model, point.profile, t0, start / start.sum())
    return float(np.max(np.abs(m[-1] - point.m_T)))


def forward_enrich(model: GameModel, cloud: ValueCloud, opts: SolveOptions | None = None, starts: int = 8,
                   jobs: int | None = None) -> ValueCloud:
    """Add the certified multi-start equilibria at the cloud's query as forward-solve points."""
    if starts == 0:
        return cloud
    reports = multi_start_solve(model, cloud.t0, cloud.m0, opts, starts=starts, jobs=jobs)
    existing = [p.phi0 for p in cloud.points if p.source == FORWARD]
    for r in reports:
        if not (r.converged and r.certificate.certified):
            continue
        if any(np.max(np.abs(r.phi0 - e)) < DEDUP_TOL for e in existing):
            continue
        existing.append(r.phi0)
        cloud.points.append(CloudPoint(phi0=r.phi0.copy(), dist_m=0.0, dist_mu=0.0, z_abs=abs(r.certificate.J),
                                       source=FORWARD, profile=r.profile, m_T=r.bundle.m[-1].copy(),
                                       m_start=r.bundle.m[0].copy(), certificate=r.certificate))
    cloud.points.sort(key=lambda p: (tuple(p.phi0), p.source))
    return cloud


def membership_residual(model: GameModel, t0: float, m0, phi0, opts: SampleOptions | None = None,
                        jobs: int | None = None) -> float:
    """``min`` over valid backward samples of ``max(dist_m, dist_mu, |z(t0)|, |phi(t0) - phi0|_inf)``.

    Unless ``opts.mu_radius`` is set, ``mu(t0)`` is started exactly at the
    uniform law so that ``dist_mu`` only carries integration error.
    """
    opts = opts or SampleOptions()
    if opts.mu_radius is None:
        opts = dataclasses.replace(opts, mu_radius=0.0)
    raw = sample_backward(model, t0, m0, opts, jobs)
    if raw is None:
        return float("inf")
    valid = raw["valid"] & raw["mu_ok"]
    if not valid.any():
        return float("inf")
    gap = np.max(np.abs(raw["phi0"] - np.asarray(phi0, dtype=float)), axis=1)
    res = np.maximum.reduce([raw["dist_m"], raw["dist_mu"], np.abs(raw["z0"]), gap])
    return float(np.min(res[valid]))


# ---------------------------------------------------------------------------
# export


def cloud_to_csv(cloud: ValueCloud) -> str:
    d = len(cloud.m0)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow([f"phi_{i + 1}" for i in range(d)] + ["dist_m", "dist_mu", "z_abs", "source"])
    for p in cloud.points:
        writer.writerow([format(float(x), ".17g") for x in (*p.phi0, p.dist_m, p.dist_mu, p.z_abs)] + [p.source])
    return buf.getvalue()


def cloud_sidecar(cloud: ValueCloud, meta: dict | None = None) -> str:
    doc = {
        "version": __version__,
        "query": {"t0": cloud.t0, "m0": cloud.m0.tolist()},
        "tolerances": cloud.tolerances,
        "n_samples": cloud.n_samples,
        "n_valid": cloud.n_valid,
        "n_points": len(cloud.points),
        "points": [p.to_dict() for p in cloud.points],
        "nearest_misses": cloud.nearest_misses,
    }
    if meta:
        doc["meta"] = meta
    return json.dumps(doc, indent=2, sort_keys=True)
