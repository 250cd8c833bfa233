"""Forward Kolmogorov, backward Bellman, representative-player and z dynamics.

All trajectories live on the time grid of the strategy profile.  The
population flow ``m`` is integrated first; every other equation treats it as
frozen data.  Whenever an integrator needs ``m`` between grid nodes it uses
the cubic Hermite interpolant built from the node values and the one-sided
node derivatives of the interval's own control, which keeps all downstream
quantities fourth-order accurate.

Array conventions: the time axis comes first.  The helpers prefixed with an
underscore accept extra batch axes between time and state (``(N+1, ..., d)``)
so the attainability sampler can reuse them.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMassError, GridMismatchError
from .model import GameModel, as_simplex, renormalize
from .relaxed import RelaxedStrategyProfile, hamiltonian_values, mixed_generator, mixed_reward


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    time_grid: np.ndarray  # (N+1,)
    m: np.ndarray  # (N+1, d)
    phi: np.ndarray  # (N+1, d)
    mu: np.ndarray  # (N+1, d)
    z: np.ndarray  # (N+1,)
    profile: RelaxedStrategyProfile

    @property
    def t0(self) -> float:
        return float(self.time_grid[0])

    @property
    def N(self) -> int:
        return len(self.time_grid) - 1

    @property
    def d(self) -> int:
        return self.m.shape[1]


def _steps(time_grid, ndim: int = 2) -> np.ndarray:
    h = np.diff(np.asarray(time_grid, dtype=float))
    return h.reshape(h.shape + (1,) * (ndim - 1))


def _check_start(profile: RelaxedStrategyProfile, t0: float, T: float):
    if not t0 < T:
        raise ValueError(f"initial time {t0} must be before the horizon {T}")
    if profile.time_grid[0] != t0 or abs(profile.time_grid[-1] - T) > 1e-12 * max(1.0, abs(T)):
        raise GridMismatchError(
            f"profile grid spans [{profile.time_grid[0]}, {profile.time_grid[-1]}], expected [{t0}, {T}]")


def _rowvec(v, A):
    """Row vector times matrix, batched: ``(..., d) x (..., d, d) -> (..., d)``."""
    return np.matmul(v[..., None, :], A)[..., 0, :]


def _kolmogorov_rhs(model: GameModel, m, w):
    return _rowvec(m, mixed_generator(model, m, w))


# ---------------------------------------------------------------------------
# dense output and quadrature helpers (time axis first, optional batch axes)


def _hermite_mid(y, dy_left, dy_right, h):
    return 0.5 * (y[:-1] + y[1:]) + 0.125 * h * (dy_left - dy_right)


def _m_mid(model, w, h, m):
    return _hermite_mid(m, _kolmogorov_rhs(model, m[:-1], w), _kolmogorov_rhs(model, m[1:], w), h)


def _phi_mid(model, h, m, phi):
    H = hamiltonian_values(model, m, phi)
    return _hermite_mid(phi, -H[:-1], -H[1:], h)


def _mu_mid(model, w, h, m, mu):
    left = _rowvec(mu[:-1], mixed_generator(model, m[:-1], w))
    right = _rowvec(mu[1:], mixed_generator(model, m[1:], w))
    return _hermite_mid(mu, left, right, h)


def _simpson(f_left, f_mid, f_right, h):
    """Per-interval integrals; ``h`` broadcasts against the integrand values."""
    return h * (f_left + 4.0 * f_mid + f_right) / 6.0


def _reward_increments(model, w, h, m, mu, m_mid, mu_mid):
    """``int mu g(m, nu) dt`` over every grid interval, shape ``(N, ...)``."""
    fl = np.sum(mu[:-1] * mixed_reward(model, m[:-1], w), axis=-1)
    fm = np.sum(mu_mid * mixed_reward(model, m_mid, w), axis=-1)
    fr = np.sum(mu[1:] * mixed_reward(model, m[1:], w), axis=-1)
    return _simpson(fl, fm, fr, h[..., 0])


def _z_rate(model, w, m, phi, mu):
    """Right-hand side ``mu (H - Q(nu) phi - g(nu))`` of the z equation."""
    A = mixed_generator(model, m, w)
    drift = np.matmul(A, phi[..., None])[..., 0]
    slack = hamiltonian_values(model, m, phi) - drift - mixed_reward(model, m, w)
    return np.sum(mu * slack, axis=-1)


def _z_increments(model, w, h, m, phi, mu, m_mid, phi_mid, mu_mid):
    fl = _z_rate(model, w, m[:-1], phi[:-1], mu[:-1])
    fm = _z_rate(model, w, m_mid, phi_mid, mu_mid)
    fr = _z_rate(model, w, m[1:], phi[1:], mu[1:])
    return _simpson(fl, fm, fr, h[..., 0])


def _linear_propagators(A_start, A_mid, A_end, h):
    """RK4 transfer matrices for the row-vector ODE ``y' = y A(t)``.

    With ``h > 0`` and ``(A_start, A_end) = (A(t_n), A(t_{n+1}))`` this is a
    forward step; passing the matrices in reverse order with ``-h`` gives the
    backward step.  ``y_next = y @ P``.
    """
    d = A_start.shape[-1]
    eye = np.eye(d)
    hh = np.asarray(h)[..., None, None]
    B1 = A_start
    B2 = (eye + 0.5 * hh * B1) @ A_mid
    B3 = (eye + 0.5 * hh * B2) @ A_mid
    B4 = (eye + hh * B3) @ A_end
    return eye + hh / 6.0 * (B1 + 2.0 * B2 + 2.0 * B3 + B4)


def _mu_propagators(model, w, h, m, m_mid, backward=False):
    A0 = mixed_generator(model, m[:-1], w)
    A1 = mixed_generator(model, m_mid, w)
    A2 = mixed_generator(model, m[1:], w)
    if backward:
        return _linear_propagators(A2, A1, A0, -h)
    return _linear_propagators(A0, A1, A2, h)


# ---------------------------------------------------------------------------
# public integrators


def integrate_forward_m(model: GameModel, profile: RelaxedStrategyProfile, t0: float, m0) -> np.ndarray:
    """RK4 for ``m' = m Q(m, nu)`` with renormalization after each full step."""
    _check_start(profile, t0, model.horizon_T)
    m = as_simplex(m0, model.d, "m0")
    if profile.d != model.d or profile.K != model.K:
        raise GridMismatchError(f"profile is {profile.d}x{profile.K}, model is {model.d}x{model.K}")
    return _forward_m_steps(model, profile.weights, np.diff(profile.time_grid), m)


def _forward_m_steps(model: GameModel, weights, h, m) -> np.ndarray:
    N, d = len(h), model.d
    # Fold the control weights into the coefficient tensor once per step and
    # split it by monomial degree: A(m) = C0 + m C1 + m (m C2), flattened d*d.
    C = np.einsum("nik,fkij->nfij", weights, model.q_coef).reshape(N, -1, d * d)
    C0, C1, C2 = C[:, 0], C[:, 1:d + 1], C[:, d + 1:].reshape(N, d, d, d * d)
    out = np.empty((N + 1, d))
    out[0] = m

    def rhs(y, n):
        return y @ (C0[n] + y @ C1[n] + y @ (y @ C2[n])).reshape(d, d)

    for n in range(N):
        hn = h[n]
        k1 = rhs(m, n)
        k2 = rhs(m + 0.5 * hn * k1, n)
        k3 = rhs(m + 0.5 * hn * k2, n)
        k4 = rhs(m + hn * k3, n)
        m = m + hn / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if m.min() < 0.0 or abs(m.sum() - 1.0) > 1e-13:
            m = renormalize(m)
        out[n + 1] = m
    return out


def _bellman_sweep(Qn, Gn, Qm, Gm, h, phi_T):
    """Backward RK4 for ``phi' = -H`` given rate/reward tables at nodes and midpoints."""
    N = len(h)
    phi = np.array(phi_T, dtype=float)
    out = np.empty((N + 1,) + phi.shape)
    out[N] = phi
    for n in range(N - 1, -1, -1):
        hn = h[n]
        Qa, Ga, Qb, Gb = Qn[n + 1], Gn[n + 1], Qm[n], Gm[n]
        k1 = (Qa @ phi + Ga).max(axis=0)
        k2 = (Qb @ (phi + 0.5 * hn * k1) + Gb).max(axis=0)
        k3 = (Qb @ (phi + 0.5 * hn * k2) + Gb).max(axis=0)
        k4 = (Qn[n] @ (phi + hn * k3) + Gn[n]).max(axis=0)
        phi = phi + hn / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[n] = phi
    return out


def integrate_backward_phi(model: GameModel, profile: RelaxedStrategyProfile, m_traj) -> np.ndarray:
    """Backward RK4 for the Bellman equation ``phi' = -H(m, phi)``, ``phi(T) = sigma(m(T))``.

    The profile only enters through the dense output of the frozen ``m``.
    """
    m = np.asarray(m_traj, dtype=float)
    if m.shape != (profile.N + 1, model.d):
        raise GridMismatchError(f"m trajectory shape {m.shape} does not match grid of {profile.N} steps")
    h = np.diff(profile.time_grid)
    m_mid = _m_mid(model, profile.weights, h[:, None], m)
    Qn, Gn = model.rates(m), model.rewards(m)
    Qm, Gm = model.rates(m_mid), model.rewards(m_mid)
    return _bellman_sweep(Qn, Gn, Qm, Gm, h, model.terminal(m[-1]))


def integrate_forward_mu(model: GameModel, profile: RelaxedStrategyProfile, m_traj, mu0) -> np.ndarray:
    """RK4 for ``mu' = mu Q(m(t), nu)`` along the frozen population flow.

    ``mu0`` may be a single distribution ``(d,)`` or a stack ``(B, d)``; the
    result has shape ``(N+1, d)`` or ``(N+1, B, d)``.
    """
    m = np.asarray(m_traj, dtype=float)
    if m.shape != (profile.N + 1, model.d):
        raise GridMismatchError(f"m trajectory shape {m.shape} does not match grid of {profile.N} steps")
    mu = np.asarray(mu0, dtype=float)
    if mu.ndim == 1:
        mu = as_simplex(mu, model.d, "mu0")
    h = np.diff(profile.time_grid)
    m_mid = _m_mid(model, profile.weights, h[:, None], m)
    P = _mu_propagators(model, profile.weights, h, m, m_mid)
    out = np.empty((profile.N + 1,) + mu.shape)
    out[0] = mu
    for n in range(profile.N):
        mu = _rescale_mass(mu @ P[n])
        out[n + 1] = mu
    return out


def _rescale_mass(v):
    """Mass correction for the linear mu equation.

    Unlike :func:`renormalize` this never clips, so the map stays linear and
    superposition over initial conditions holds to rounding.  The RK4
    propagator conserves mass exactly in exact arithmetic; only rounding drift
    beyond a few ulps is rescaled away.
    """
    total = v.sum(axis=-1, keepdims=True)
    if not total.min() > 0.5:
        raise DegenerateMassError(f"total mass {total.min()!r} <= 0.5; integrator blew up")
    if abs(total - 1.0).max() <= 1e-13:
        return v
    return v / total


def integrate_z(model: GameModel, profile: RelaxedStrategyProfile, m, phi, mu, anchor: str = "forward") -> np.ndarray:
    """Quadrature of ``z' = mu (H - Q(nu) phi - g(nu))``.

    The right-hand side does not involve ``z``, so the RK4 step reduces to
    Simpson's rule on each interval with Hermite midpoint values.
    ``anchor='forward'`` pins ``z[0] = 0``; ``'terminal'`` pins ``z[N] = 0``.
    """
    m, phi, mu = (np.asarray(a, dtype=float) for a in (m, phi, mu))
    w = profile.weights
    h = np.diff(profile.time_grid)[:, None]
    m_mid = _m_mid(model, w, h, m)
    inc = _z_increments(model, w, h, m, phi, mu, m_mid, _phi_mid(model, h, m, phi), _mu_mid(model, w, h, m, mu))
    z = np.zeros(len(m))
    z[1:] = np.cumsum(inc)
    if anchor == "forward":
        return z
    if anchor == "terminal":
        return z - z[-1]
    raise ValueError(f"anchor must be 'forward' or 'terminal', got {anchor!r}")


def roll_bundle(model: GameModel, profile: RelaxedStrategyProfile, t0: float, m0, mu0,
                N: int | None = None) -> TrajectoryBundle:
    """Integrate ``m`` forward, ``phi`` backward, ``mu`` forward and ``z`` (anchored at ``t0``)."""
    if N is not None and N != profile.N:
        raise GridMismatchError(f"profile has {profile.N} steps, {N} requested")
    m = integrate_forward_m(model, profile, t0, m0)
    phi = integrate_backward_phi(model, profile, m)
    mu = integrate_forward_mu(model, profile, m, mu0)
    z = integrate_z(model, profile, m, phi, mu, anchor="forward")
    return TrajectoryBundle(time_grid=profile.time_grid, m=m, phi=phi, mu=mu, z=z, profile=profile)


def reward_integral(model: GameModel, profile: RelaxedStrategyProfile, m, mu) -> float:
    """``int_{t0}^T mu(t) g(m(t), nu(t)) dt`` by Simpson with Hermite midpoints.

    ``mu`` may carry a batch axis after time; the result then has that shape.
    """
    m = np.asarray(m, dtype=float)
    mu = np.asarray(mu, dtype=float)
    w = profile.weights
    h = np.diff(profile.time_grid)[:, None]
    m_mid = _m_mid(model, w, h, m)
    if mu.ndim == 3:
        # broadcast the population quantities across the batch axis
        wb, hb, mb, mmb = w[:, None], h[:, None], m[:, None], m_mid[:, None]
        mu_mid = _mu_mid(model, wb, hb, mb, mu)
        return _reward_increments(model, wb, hb, mb, mu, mmb, mu_mid).sum(axis=0)
    mu_mid = _mu_mid(model, w, h, m, mu)
    return float(_reward_increments(model, w, h, m, mu, m_mid, mu_mid).sum())


# ---------------------------------------------------------------------------
# CSV export


def bundle_to_csv(bundle: TrajectoryBundle) -> str:
    d = bundle.d
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["t"] + [f"m_{i + 1}" for i in range(d)] + [f"phi_{i + 1}" for i in range(d)]
                    + [f"mu_{i + 1}" for i in range(d)] + ["z"])
    for n in range(bundle.N + 1):
        row = [bundle.time_grid[n], *bundle.m[n], *bundle.phi[n], *bundle.mu[n], bundle.z[n]]
        writer.writerow([format(float(x), ".17g") for x in row])
    return buf.getvalue()
