"""Control-reformulation functionals and the equilibrium certificate.

``J = mu0 . phi(t0) - mu(T) . sigma(m(T)) - int mu g(m, nu) dt`` measures how
much a representative player starting from ``mu0`` gains by playing the
Bellman-optimal strategy instead of ``nu`` against the population flow
``m``.  It is nonnegative and vanishes exactly at equilibria, so together
with residual checks on the stored trajectories it certifies a candidate.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import TrajectoryBundle, integrate_forward_mu, reward_integral
from .model import SIMPLEX_EPS, GameModel
from .relaxed import hamiltonian_values, mixed_generator, optimality_gaps, support_violation


@dataclass(frozen=True)
class Tolerances:
    tol_J: float = 1e-4
    tol_residual: float = 1e-6
    tol_support: float = 1e-6


@dataclass(frozen=True, eq=False)
class CertificateReport:
    J: float
    J_k: np.ndarray
    J_prime: float | None
    bellman_residual: float
    terminal_residual: float
    kolmogorov_residual: float
    support_violation: float
    certified: bool
    tolerances: Tolerances = field(default_factory=Tolerances)
    boundary_m0: bool = False

    @property
    def verdict(self) -> str:
        return "certified" if self.certified else "not-certified"

    def to_dict(self) -> dict:
        return {
            "J": self.J,
            "J_k": [float(x) for x in self.J_k],
            "J_prime": self.J_prime,
            "bellman_residual": self.bellman_residual,
            "terminal_residual": self.terminal_residual,
            "kolmogorov_residual": self.kolmogorov_residual,
            "support_violation": self.support_violation,
            "verdict": self.verdict,
            "boundary_m0": self.boundary_m0,
            "tolerances": asdict(self.tolerances),
        }


def cost_J(model: GameModel, bundle: TrajectoryBundle) -> float:
    mu0, phi0 = bundle.mu[0], bundle.phi[0]
    terminal = float(bundle.mu[-1] @ model.terminal(bundle.m[-1]))
    return float(mu0 @ phi0) - terminal - reward_integral(model, bundle.profile, bundle.m, bundle.mu)


def cost_Jk_all(model: GameModel, bundle: TrajectoryBundle) -> np.ndarray:
    """``J_k`` for every state ``k`` at once; ``mu^k`` is re-integrated from ``e^k``."""
    d = model.d
    mus = integrate_forward_mu(model, bundle.profile, bundle.m, np.eye(d))  # (N+1, d, d)
    terminal = mus[-1] @ model.terminal(bundle.m[-1])
    rewards = reward_integral(model, bundle.profile, bundle.m, mus)
    return bundle.phi[0] - terminal - rewards


def cost_Jk(model: GameModel, bundle: TrajectoryBundle, k: int) -> float:
    """Exploitability seen by a representative player started in state ``k`` (0-indexed)."""
    if not 0 <= k < model.d:
        raise IndexError(f"state index {k} outside 0..{model.d - 1}")
    mu = integrate_forward_mu(model, bundle.profile, bundle.m, np.eye(model.d)[k])
    terminal = float(mu[-1] @ model.terminal(bundle.m[-1]))
    return float(bundle.phi[0, k]) - terminal - reward_integral(model, bundle.profile, bundle.m, mu)


def cost_Jprime(model: GameModel, bundle: TrajectoryBundle) -> float:
    """``J`` with the representative player replaced by the population itself."""
    if not np.allclose(bundle.mu[0], bundle.m[0], rtol=0.0, atol=1e-12):
        warnings.warn("J' assumes mu0 = m0; this bundle was rolled with a different mu0", stacklevel=2)
    m = bundle.m
    terminal = float(m[-1] @ model.terminal(m[-1]))
    return float(m[0] @ bundle.phi[0]) - terminal - reward_integral(model, bundle.profile, m, m)


# ---------------------------------------------------------------------------
# residuals of the stored trajectories (independent of integrator internals)


def kolmogorov_residual(model: GameModel, bundle: TrajectoryBundle) -> float:
    m, w = bundle.m, bundle.profile.weights
    h = np.diff(bundle.time_grid)[:, None]
    mbar = 0.5 * (m[:-1] + m[1:])
    drift = np.einsum("ni,nij->nj", mbar, mixed_generator(model, mbar, w))
    return float(np.max(np.abs(np.diff(m, axis=0) / h - drift)))


def bellman_residual(model: GameModel, bundle: TrajectoryBundle) -> float:
    m, phi = bundle.m, bundle.phi
    h = np.diff(bundle.time_grid)[:, None]
    H = hamiltonian_values(model, 0.5 * (m[:-1] + m[1:]), 0.5 * (phi[:-1] + phi[1:]))
    return float(np.max(np.abs(np.diff(phi, axis=0) / h + H)))


def terminal_residual(model: GameModel, bundle: TrajectoryBundle) -> float:
    return float(np.max(np.abs(bundle.phi[-1] - model.terminal(bundle.m[-1]))))


def bundle_support_violation(model: GameModel, bundle: TrajectoryBundle) -> float:
    gaps = optimality_gaps(model, bundle.m[:-1], bundle.phi[:-1])
    return support_violation(bundle.profile, gaps)


def verify_solution(model: GameModel, bundle: TrajectoryBundle, tolerances: Tolerances | None = None) -> CertificateReport:
    tol = tolerances or Tolerances()
    J = cost_J(model, bundle)
    Jk = cost_Jk_all(model, bundle)
    Jp = None
    if np.allclose(bundle.mu[0], bundle.m[0], rtol=0.0, atol=1e-12):
        Jp = cost_Jprime(model, bundle)
    kol = kolmogorov_residual(model, bundle)
    bel = bellman_residual(model, bundle)
    term = terminal_residual(model, bundle)
    sup = bundle_support_violation(model, bundle)
    certified = (abs(J) <= tol.tol_J and kol <= tol.tol_residual and bel <= tol.tol_residual
                 and term <= tol.tol_residual and sup <= tol.tol_support)
    return CertificateReport(
        J=J, J_k=Jk, J_prime=Jp, bellman_residual=bel, terminal_residual=term,
        kolmogorov_residual=kol, support_violation=sup, certified=bool(certified),
        tolerances=tol, boundary_m0=bool(np.any(bundle.m[0] <= SIMPLEX_EPS)),
    )


def report_to_json(report: CertificateReport, meta: dict | None = None) -> str:
    doc = report.to_dict()
    if meta:
        doc["meta"] = meta
    return json.dumps(doc, indent=2, sort_keys=True)
