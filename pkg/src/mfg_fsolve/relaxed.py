"""Relaxed feedback strategies, mixed generators and the Hamiltonian.

A relaxed strategy assigns to every time step and state a probability vector
over the finite control grid; the weights are piecewise constant on the
integrator grid, ``weights[n]`` acting on ``[tau_n, tau_{n+1})``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import GridMismatchError
from .model import GameModel

TIE_TOL = 1e-10
WEIGHT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class RelaxedStrategyProfile:
    time_grid: np.ndarray  # (N+1,)
    weights: np.ndarray  # (N, d, K)

    def __post_init__(self):
        tg = np.asarray(self.time_grid, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if tg.ndim != 1 or tg.size < 2 or np.any(np.diff(tg) <= 0):
            raise ValueError("time grid must be strictly increasing with at least two nodes")
        if w.ndim != 3 or w.shape[0] != tg.size - 1:
            raise GridMismatchError(f"weights shape {w.shape} does not match {tg.size - 1} grid intervals")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > WEIGHT_TOL):
            raise ValueError("every weights[n][i] must be a probability vector over controls")
        tg.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "time_grid", tg)
        object.__setattr__(self, "weights", w)

    @property
    def N(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.weights.shape[1]

    @property
    def K(self) -> int:
        return self.weights.shape[2]

    def same_grid(self, other: "RelaxedStrategyProfile") -> bool:
        return self.time_grid.shape == other.time_grid.shape and np.array_equal(self.time_grid, other.time_grid)


def uniform_grid(t0: float, T: float, N: int) -> np.ndarray:
    if N < 1:
        raise ValueError("need at least one step")
    if not t0 < T:
        raise ValueError(f"initial time {t0} must be before the horizon {T}")
    grid = t0 + (T - t0) * np.arange(N + 1) / N
    grid[-1] = T
    return grid


def uniform_profile(time_grid, d: int, K: int) -> RelaxedStrategyProfile:
    N = len(time_grid) - 1
    return RelaxedStrategyProfile(np.asarray(time_grid, dtype=float), np.full((N, d, K), 1.0 / K))


def dirac_weights(choices, K: int) -> np.ndarray:
    choices = np.asarray(choices, dtype=int)
    return np.eye(K)[choices]


def dirac_profile(time_grid, choices, K: int) -> RelaxedStrategyProfile:
    """Profile from integer control choices of shape ``(N, d)``."""
    return RelaxedStrategyProfile(np.asarray(time_grid, dtype=float), dirac_weights(choices, K))


# ---------------------------------------------------------------------------
# mixed quantities


def mixed_generator(model: GameModel, m, nu_slice) -> np.ndarray:
    """Control-averaged rate matrix; ``nu_slice`` has shape ``(..., d, K)``."""
    w = np.swapaxes(np.asarray(nu_slice, dtype=float), -1, -2)
    return np.sum(w[..., None] * model.rates(m), axis=-3)


def mixed_reward(model: GameModel, m, nu_slice) -> np.ndarray:
    w = np.swapaxes(np.asarray(nu_slice, dtype=float), -1, -2)
    return np.sum(w * model.rewards(m), axis=-2)


def scores(model: GameModel, m, phi) -> np.ndarray:
    """Per-control Hamiltonian scores ``sum_j q(i,j,m,u) phi_j + g(i,m,u)``, shape ``(..., K, d)``."""
    phi = np.asarray(phi, dtype=float)
    return np.matmul(model.rates(m), phi[..., None, :, None])[..., 0] + model.rewards(m)


def hamiltonian_values(model: GameModel, m, phi) -> np.ndarray:
    return scores(model, m, phi).max(axis=-2)


@dataclass(frozen=True, eq=False)
class HamiltonianValue:
    values: np.ndarray  # (d,)
    argmax_sets: tuple[tuple[int, ...], ...]
    gap: np.ndarray  # (d, K)


def _gaps_and_ties(sc: np.ndarray):
    """``sc`` has shape ``(..., K, d)``; returns values ``(..., d)``, gaps ``(..., d, K)``, tie mask."""
    values = sc.max(axis=-2)
    gap = np.swapaxes(values[..., None, :] - sc, -1, -2)
    ties = gap <= TIE_TOL
    gap = np.where(ties, 0.0, gap)
    return values, gap, ties


def hamiltonian(model: GameModel, m, phi) -> HamiltonianValue:
    values, gap, ties = _gaps_and_ties(scores(model, m, phi))
    sets = tuple(tuple(int(k) for k in np.flatnonzero(row)) for row in ties)
    return HamiltonianValue(values=values, argmax_sets=sets, gap=gap)


def optimality_gaps(model: GameModel, m, phi) -> np.ndarray:
    """Gap of every control, ``(..., d) -> (..., d, K)``; zero on the argmax within ``TIE_TOL``."""
    return _gaps_and_ties(scores(model, m, phi))[1]


def best_response_slice(model: GameModel, m, phi) -> np.ndarray:
    """Dirac weights on the lowest-index maximizer for every state, shape ``(..., d, K)``."""
    gap = optimality_gaps(model, m, phi)
    choice = np.argmax(gap == 0.0, axis=-1)
    return np.eye(model.K)[choice]


def mix_profiles(a: RelaxedStrategyProfile, b: RelaxedStrategyProfile, lam: float) -> RelaxedStrategyProfile:
    if not a.same_grid(b):
        raise GridMismatchError("cannot mix profiles defined on different time grids")
    if a.weights.shape != b.weights.shape:
        raise GridMismatchError(f"profile shapes differ: {a.weights.shape} vs {b.weights.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixing weight must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return a
    if lam == 1.0:
        return b
    w = (1.0 - lam) * a.weights + lam * b.weights
    # rounding can leave a row off by an ulp; rescale keeps the invariant exact
    w = w / w.sum(axis=-1, keepdims=True)
    return RelaxedStrategyProfile(a.time_grid, w)


def support_violation(profile: RelaxedStrategyProfile, gaps) -> float:
    """Largest mass-weighted optimality gap ``max_{n,i} sum_k w[n,i,k] gap[n,i,k]``."""
    gaps = np.asarray(gaps, dtype=float)
    if gaps.shape != profile.weights.shape:
        raise GridMismatchError(f"gaps shape {gaps.shape} does not match profile {profile.weights.shape}")
    return float(np.max(np.sum(profile.weights * gaps, axis=-1)))


# ---------------------------------------------------------------------------
# CSV export


def profile_to_csv(profile: RelaxedStrategyProfile, labels) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["t_index", "state", "control_label", "weight"])
    N, d, K = profile.weights.shape
    for n in range(N):
        for i in range(d):
            for k in range(K):
                writer.writerow([n, i + 1, labels[k], format(profile.weights[n, i, k], ".17g")])
    return buf.getvalue()


def profile_from_csv(text: str, time_grid, labels) -> RelaxedStrategyProfile:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("profile CSV is empty")
    N = len(time_grid) - 1
    d = max(int(r["state"]) for r in rows)
    K = len(labels)
    w = np.zeros((N, d, K))
    seen = np.zeros((N, d, K), dtype=bool)
    for r in rows:
        n, i, k = int(r["t_index"]), int(r["state"]) - 1, list(labels).index(r["control_label"])
        if not (0 <= n < N):
            raise ValueError(f"t_index {n} outside 0..{N - 1}")
        w[n, i, k] = float(r["weight"])
        seen[n, i, k] = True
    if not seen.all():
        raise ValueError("profile CSV does not cover every (t_index, state, control)")
    return RelaxedStrategyProfile(np.asarray(time_grid, dtype=float), w)
