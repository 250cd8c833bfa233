"""Equilibrium search by best-response iteration, certified by ``J``.

Candidates are produced by fictitious play (averaging best responses with
weight ``2/(n+2)``) or plain Picard iteration.  Neither scheme is trusted:
a run is reported converged only when the rolled bundle passes
:func:`verify_solution`.

Averaging leaves a vanishing but nonzero weight on stale best responses, so
once the best response has stopped changing the solver also tries the pure
best response itself ("purification").  That single extra roll turns the
slow ``O(1/n^2)`` decay of the stale weight into an immediate certificate
whenever the limit is a strict pure equilibrium.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from ._parallel import parallel_map
from .dynamics import TrajectoryBundle, integrate_backward_phi, integrate_forward_m, roll_bundle
from .model import GameModel, as_simplex, uniform
from .reformulation import CertificateReport, Tolerances, cost_J, verify_solution
from .relaxed import (RelaxedStrategyProfile, best_response_slice, mix_profiles, uniform_grid,
                      uniform_profile)

FICTITIOUS_PLAY = "fictitious-play"
PICARD = "picard"
DEDUP_TOL = 1e-4


@dataclass(frozen=True)
class SolveOptions:
    N: int = 1000
    max_iters: int = 2000
    tol_J: float = 1e-4
    seed: int = 0
    tol_residual: float = 1e-6
    tol_support: float = 1e-6
    purify: bool = True
    plateau_window: int = 10

    @property
    def tolerances(self) -> Tolerances:
        return Tolerances(tol_J=self.tol_J, tol_residual=self.tol_residual, tol_support=self.tol_support)


@dataclass(frozen=True, eq=False)
class SolveReport:
    bundle: TrajectoryBundle
    certificate: CertificateReport
    iterations: int
    J_history: list = field(default_factory=list)
    scheme: str = FICTITIOUS_PLAY
    seed: int = 0
    converged: bool = False

    @property
    def profile(self) -> RelaxedStrategyProfile:
        return self.bundle.profile

    @property
    def phi0(self) -> np.ndarray:
        return self.bundle.phi[0]

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "seed": self.seed,
            "converged": self.converged,
            "iterations": self.iterations,
            "J_history": [float(x) for x in self.J_history],
            "t0": self.bundle.t0,
            "m0": [float(x) for x in self.bundle.m[0]],
            "phi0": [float(x) for x in self.bundle.phi[0]],
            "mT": [float(x) for x in self.bundle.m[-1]],
            "certificate": self.certificate.to_dict(),
        }


def best_response(model: GameModel, profile: RelaxedStrategyProfile, t0: float, m0) -> RelaxedStrategyProfile:
    m = integrate_forward_m(model, profile, t0, m0)
    phi = integrate_backward_phi(model, profile, m)
    return _best_response_from(model, profile, m, phi)


def _best_response_from(model, profile, m, phi) -> RelaxedStrategyProfile:
    return RelaxedStrategyProfile(profile.time_grid, best_response_slice(model, m[:-1], phi[:-1]))


def _roll(model, profile, t0, m0):
    bundle = roll_bundle(model, profile, t0, m0, uniform(model.d))
    return bundle, cost_J(model, bundle)


def _iterate(model: GameModel, t0: float, m0, opts: SolveOptions, initial: RelaxedStrategyProfile | None,
             scheme: str) -> SolveReport:
    m0 = as_simplex(m0, model.d, "m0")
    if initial is None:
        initial = uniform_profile(uniform_grid(t0, model.horizon_T, opts.N), model.d, model.K)
    tol = opts.tolerances
    alpha = initial
    history: list[float] = []
    seen: set[bytes] = set()
    tried: set[bytes] = set()
    prev_br = None
    updates = 0

    def finish(bundle, cert, converged):
        return SolveReport(bundle=bundle, certificate=cert, iterations=updates, J_history=history,
                           scheme=scheme, seed=opts.seed, converged=converged)

    bundle, J = _roll(model, alpha, t0, m0)
    history.append(J)
    while True:
        if J <= opts.tol_J:
            cert = verify_solution(model, bundle, tol)
            if cert.certified:
                return finish(bundle, cert, True)
        br = _best_response_from(model, alpha, bundle.m, bundle.phi)

        # purification probe: a best response that repeats is rolled on its own
        if (opts.purify and scheme == FICTITIOUS_PLAY and prev_br is not None
                and np.array_equal(br.weights, prev_br.weights)):
            key = br.weights.tobytes()
            if key not in tried and updates < opts.max_iters:
                tried.add(key)
                pure_bundle, pure_J = _roll(model, br, t0, m0)
                if pure_J <= opts.tol_J:
                    cert = verify_solution(model, pure_bundle, tol)
                    if cert.certified:
                        updates += 1
                        history.append(pure_J)
                        return finish(pure_bundle, cert, True)
        prev_br = br

        if updates >= opts.max_iters:
            break
        if scheme == PICARD:
            key = br.weights.tobytes()
            if key in seen:
                break  # the best-response map has entered a cycle
            seen.add(key)
            alpha = br
        else:
            alpha = mix_profiles(alpha, br, 2.0 / (updates + 2.0))
        updates += 1
        bundle, J = _roll(model, alpha, t0, m0)
        history.append(J)
        w = opts.plateau_window
        if scheme == PICARD and len(history) >= w and J > opts.tol_J:
            recent = history[-w:]
            if max(recent) - min(recent) <= 1e-12:
                break
    return finish(bundle, verify_solution(model, bundle, tol), False)


def solve_fictitious_play(model: GameModel, t0: float, m0, opts: SolveOptions | None = None,
                          initial: RelaxedStrategyProfile | None = None) -> SolveReport:
    """Fictitious play from ``initial`` (uniform weights by default).

    ``iterations`` counts best-response updates; ``J_history`` holds the
    exploitability of every rolled iterate including the initial one.
    """
    return _iterate(model, t0, m0, opts or SolveOptions(), initial, FICTITIOUS_PLAY)


def solve_picard(model: GameModel, t0: float, m0, opts: SolveOptions | None = None,
                 initial: RelaxedStrategyProfile | None = None) -> SolveReport:
    """Plain best-response iteration; stops on a repeated profile or a flat ``J`` tail."""
    return _iterate(model, t0, m0, opts or SolveOptions(), initial, PICARD)


def random_profile(time_grid, d: int, K: int, rng: np.random.Generator, pieces: int = 8) -> RelaxedStrategyProfile:
    """Piecewise-constant profile with Dirichlet(1) weights on ``pieces`` equal time blocks."""
    N = len(time_grid) - 1
    pieces = max(1, min(pieces, N))
    block = rng.dirichlet(np.ones(K), size=(pieces, d))
    idx = np.minimum(np.arange(N) * pieces // N, pieces - 1)
    return RelaxedStrategyProfile(np.asarray(time_grid, dtype=float), block[idx])


def _run_start(s, model, t0, m0, opts):
    if s == 0:
        initial = None
    else:
        rng = np.random.default_rng([opts.seed, s])
        initial = random_profile(uniform_grid(t0, model.horizon_T, opts.N), model.d, model.K, rng)
    return solve_fictitious_play(model, t0, m0, opts, initial)


def dedupe_reports(reports, tol: float = DEDUP_TOL) -> list[SolveReport]:
    """Keep one report per distinct ``phi(t0)`` (sup-norm ``< tol``), converged ones first."""
    order = sorted(range(len(reports)), key=lambda i: (not reports[i].converged, i))
    kept: list[SolveReport] = []
    for i in order:
        r = reports[i]
        if all(np.max(np.abs(r.phi0 - k.phi0)) >= tol for k in kept):
            kept.append(r)
    return sorted(kept, key=lambda r: tuple(r.phi0))


def multi_start_solve(model: GameModel, t0: float, m0, opts: SolveOptions | None = None, starts: int = 8,
                      jobs: int | None = None) -> list[SolveReport]:
    """Fictitious play from ``starts`` initial profiles; start 0 is uniform, the rest random.

    Start ``s`` draws from ``default_rng([seed, s])`` so results do not depend
    on the worker count.  Reports are deduplicated on ``phi(t0)`` and sorted
    by ``phi_1(t0)``.
    """
    if starts < 1:
        raise ValueError("starts must be at least 1")
    opts = opts or SolveOptions()
    m0 = as_simplex(m0, model.d, "m0")
    run = functools.partial(_run_start, model=model, t0=t0, m0=m0, opts=opts)
    reports = parallel_map(run, range(starts), jobs)
    return dedupe_reports(reports)

