"""Grid value fields on [t, T] x simplex and residuals of the relaxed master equation.

A :class:`MasterField` stores ``Phi(t_a, m_j)`` on a product of time nodes and
the regular barycentric simplex grid with mesh ``h = 1/n``.  At a node the
residual of the relaxed master equation is the distance from
``-(dPhi/ds + H(t, m, Phi))`` to ``{xi . D : xi in co O(t, m, Phi)}`` where
``D`` holds the tangential derivatives of ``Phi`` and ``co O`` is the convex
hull of the drifts ``m Q(m, nu)`` over argmax selections ``nu``.

Between nodes the field is interpolated linearly in time and piecewise
linearly in ``m`` on the Kuhn (Freudenthal) triangulation of the grid.
"""

from __future__ import annotations

import csv
import functools
import io
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from ._parallel import parallel_map
from .dynamics import TrajectoryBundle, _forward_m_steps, integrate_forward_mu, integrate_z
from .errors import CapExceededError, GridMismatchError, SelectorResidualError
from .model import GameModel, as_simplex, simplex_grid, uniform
from .reformulation import Tolerances, verify_solution
from .relaxed import RelaxedStrategyProfile, hamiltonian, hamiltonian_values, uniform_grid
from .solver import SolveOptions, SolveReport, multi_start_solve

VERTEX_CAP = 4096
FW_ITERS = 200
FW_GAP = 1e-10


# ---------------------------------------------------------------------------
# optimality polytope and Frank-Wolfe


@dataclass(frozen=True, eq=False)
class OptimalityPolytope:
    vertices: np.ndarray  # (V, d) drifts m Q(m, nu)
    selections: tuple  # per vertex, the chosen control of every state

    def __len__(self) -> int:
        return len(self.vertices)


def optimality_polytope(model: GameModel, m, phi) -> OptimalityPolytope:
    m = np.asarray(m, dtype=float)
    hv = hamiltonian(model, m, phi)
    sizes = [len(s) for s in hv.argmax_sets]
    count = int(np.prod(sizes))
    if count > VERTEX_CAP:
        raise CapExceededError(f"optimality polytope has {count} vertices (argmax sizes per state {sizes}), "
                               f"cap is {VERTEX_CAP}")
    rates = model.rates(m)  # (K, d, d)
    selections = tuple(itertools.product(*hv.argmax_sets))
    d = model.d
    verts = np.empty((count, d))
    for v, sel in enumerate(selections):
        Q = rates[list(sel), np.arange(d)]  # row i taken from control sel[i]
        verts[v] = m @ Q
    return OptimalityPolytope(vertices=verts, selections=selections)


@dataclass(frozen=True)
class FWResult:
    distance: float
    gap: float
    weights: np.ndarray
    point: np.ndarray
    iterations: int


def _affine_minimizer(V):
    """Weights ``a`` (summing to 1) minimizing ``|a V|`` over the affine hull of the rows of ``V``."""
    n = len(V)
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = V @ V.T
    kkt[:n, n] = 1.0
    kkt[n, :n] = 1.0
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:n]


def frank_wolfe(points, target, iters: int = FW_ITERS, tol: float = FW_GAP) -> FWResult:
    """Distance from ``target`` to the convex hull of the rows of ``points``.

    Fully corrective Frank-Wolfe (Wolfe's minimum-norm-point scheme): each
    iteration adds the linear-minimization vertex to an active set and then
    re-optimizes exactly over the hull of that set, dropping vertices whose
    weight reaches zero.  Unlike the plain method it does not zig-zag near
    faces and terminates finitely on polytopes.  Started at the closest
    vertex; ``gap`` is the Frank-Wolfe duality gap of the last iterate.
    """
    P = np.asarray(points, dtype=float)
    y = np.asarray(target, dtype=float)
    Q = P - y
    k0 = int(np.argmin(np.sum(Q ** 2, axis=1)))
    active = [k0]
    lam = np.array([1.0])
    x = Q[k0].copy()
    gap = 0.0
    it = 0
    for it in range(1, iters + 1):
        s = int(np.argmin(Q @ x))
        gap = float(x @ x - Q[s] @ x)
        if gap <= tol or s in active:
            break
        active.append(s)
        lam = np.append(lam, 0.0)
        while True:  # minor cycle: walk toward the affine minimizer until it is feasible
            alpha = _affine_minimizer(Q[active])
            if np.all(alpha > 0.0):
                lam = alpha
                break
            neg = alpha <= 0.0
            theta = np.min(lam[neg] / (lam[neg] - alpha[neg]))
            lam = lam + theta * (alpha - lam)
            keep = lam > 1e-15
            keep[np.argmax(lam)] = True
            active = [k for k, f in zip(active, keep) if f]
            lam = lam[keep] / lam[keep].sum()
        x = lam @ Q[active]
    weights = np.zeros(len(P))
    weights[active] = lam
    point = weights @ P
    return FWResult(distance=float(np.linalg.norm(point - y)), gap=max(gap, 0.0), weights=weights, point=point,
                    iterations=it)


# ---------------------------------------------------------------------------
# grid fields


@dataclass(eq=False)
class MasterField:
    time_nodes: np.ndarray  # (Nt,)
    divisions: int  # mesh h = 1 / divisions
    values: np.ndarray  # (Nt, Ns, d); NaN where unsolved
    multivalued: np.ndarray  # (Nt, Ns) bool
    unsolved: np.ndarray  # (Nt, Ns) bool
    simplex_nodes: np.ndarray = field(default=None)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.time_nodes = np.asarray(self.time_nodes, dtype=float)
        d = self.values.shape[-1]
        if self.simplex_nodes is None:
            self.simplex_nodes = simplex_grid(d, self.divisions)
        if len(self.time_nodes) < 3:
            raise ValueError("a master field needs at least 3 time nodes")
        if self.values.shape != (len(self.time_nodes), len(self.simplex_nodes), d):
            raise GridMismatchError(f"values shape {self.values.shape} does not match the grids")
        comps = np.rint(self.simplex_nodes * self.divisions).astype(int)
        self._index = {tuple(c): j for j, c in enumerate(comps)}
        self._comps = comps

    @property
    def h(self) -> float:
        return 1.0 / self.divisions

    @property
    def d(self) -> int:
        return self.values.shape[-1]

    @property
    def flagged(self) -> np.ndarray:
        return self.multivalued | self.unsolved

    def node_index(self, comp) -> int | None:
        return self._index.get(tuple(int(c) for c in comp))

    def composition(self, j: int) -> np.ndarray:
        return self._comps[j]

    # -- interpolation ----------------------------------------------------

    def simplex_stencil(self, m):
        """Kuhn-triangulation vertices (node indices) and barycentric weights containing ``m``."""
        n, d = self.divisions, self.d
        x = np.maximum(np.asarray(m, dtype=float), 0.0)
        x = x / x.sum() * n
        if d == 1:
            return [0], np.array([1.0])
        u = np.minimum(np.cumsum(x)[:-1], n)
        base = np.floor(u)
        base = np.minimum(base, n - 1)  # the top face belongs to the cell below it
        frac = u - base
        order = np.argsort(-frac, kind="stable")
        verts = [base.copy()]
        for k in order:
            nxt = verts[-1].copy()
            nxt[k] += 1
            verts.append(nxt)
        fs = frac[order]
        weights = np.concatenate([[1.0 - fs[0]], fs[:-1] - fs[1:], [fs[-1]]])
        idx, wts = [], []
        for s, wgt in zip(verts, weights):
            if wgt <= 0.0:
                continue
            comp = np.diff(np.concatenate([[0.0], s, [n]])).astype(int)
            j = self.node_index(comp)
            if j is None:
                raise ValueError(f"interpolation stencil left the simplex at m={np.asarray(m).tolist()}")
            idx.append(j)
            wts.append(wgt)
        wts = np.array(wts)
        return idx, wts / wts.sum()

    def time_stencil(self, t: float):
        tn = self.time_nodes
        if not tn[0] - 1e-12 <= t <= tn[-1] + 1e-12:
            raise ValueError(f"time {t} outside the field's range [{tn[0]}, {tn[-1]}]")
        a = int(np.clip(np.searchsorted(tn, t, side="right") - 1, 0, len(tn) - 2))
        s = (t - tn[a]) / (tn[a + 1] - tn[a])
        s = min(max(s, 0.0), 1.0)
        return [(a, 1.0 - s), (a + 1, s)]

    def stencil(self, t: float, m):
        idx, wts = self.simplex_stencil(m)
        return [(a, j, wa * wj) for a, wa in self.time_stencil(t) if wa > 0 for j, wj in zip(idx, wts)]

    def interpolate(self, t: float, m) -> np.ndarray:
        out = np.zeros(self.d)
        for a, j, w in self.stencil(t, m):
            out += w * self.values[a, j]
        return out

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": __version__,
            "d": self.d,
            "divisions": self.divisions,
            "mesh": self.h,
            "time_nodes": self.time_nodes.tolist(),
            "simplex_nodes": self.simplex_nodes.tolist(),
            "values": [None if not np.isfinite(v) else float(v) for v in self.values.ravel()],
            "multivalued": self.multivalued.ravel().astype(int).tolist(),
            "unsolved": self.unsolved.ravel().astype(int).tolist(),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MasterField":
        tn = np.asarray(doc["time_nodes"], dtype=float)
        nodes = np.asarray(doc["simplex_nodes"], dtype=float)
        d = int(doc["d"])
        shape = (len(tn), len(nodes))
        vals = np.array([np.nan if v is None else v for v in doc["values"]], dtype=float).reshape(shape + (d,))
        return cls(time_nodes=tn, divisions=int(doc["divisions"]), values=vals,
                   multivalued=np.asarray(doc["multivalued"], dtype=bool).reshape(shape),
                   unsolved=np.asarray(doc["unsolved"], dtype=bool).reshape(shape),
                   simplex_nodes=nodes, config=doc.get("config", {}))


def field_to_json(fld: MasterField) -> str:
    return json.dumps(fld.to_dict(), indent=2, sort_keys=True)


def field_from_json(text: str) -> MasterField:
    return MasterField.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# derivatives and residuals


def _tangential_derivative(fld: MasterField, a: int, j: int):
    """``(D, stencil_nodes)``: row ``l`` of ``D`` is the derivative along ``e_l - e_1``.

    Differences are taken along ``e_l - e_a`` with ``a`` the heaviest
    coordinate (always at least one grid step of mass), centered where both
    neighbours exist and one-sided otherwise, then re-anchored at ``e_1``.
    """
    c = fld.composition(j)
    d, h = fld.d, fld.h
    anchor = int(np.argmax(c))
    Da = np.zeros((d, d))
    used = {j}
    for l in range(d):
        if l == anchor:
            continue
        step = np.zeros(d, dtype=int)
        step[l], step[anchor] = 1, -1
        fwd = fld.node_index(c + step)
        bwd = fld.node_index(c - step)
        if fwd is not None and bwd is not None:
            Da[l] = (fld.values[a, fwd] - fld.values[a, bwd]) / (2.0 * h)
            used.update((fwd, bwd))
        elif fwd is not None:
            Da[l] = (fld.values[a, fwd] - fld.values[a, j]) / h
            used.add(fwd)
        else:
            Da[l] = (fld.values[a, j] - fld.values[a, bwd]) / h
            used.add(bwd)
    return Da - Da[0], used


def _time_derivative(fld: MasterField, a: int, j: int) -> np.ndarray:
    tn, V = fld.time_nodes, fld.values
    return (V[a + 1, j] - V[a - 1, j]) / (tn[a + 1] - tn[a - 1])


@dataclass(frozen=True)
class ResidualDetail:
    residual: float
    gap: float
    n_vertices: int
    flagged: bool


def master_residual_detail(model: GameModel, fld: MasterField, a: int, j: int) -> ResidualDetail:
    if not 1 <= a <= len(fld.time_nodes) - 2:
        raise ValueError(f"time node {a} is not interior (1..{len(fld.time_nodes) - 2})")
    D, used = _tangential_derivative(fld, a, j)
    flagged = bool(fld.flagged[a, j] or fld.flagged[a - 1, j] or fld.flagged[a + 1, j]
                   or any(fld.flagged[a, k] for k in used))
    if flagged:
        return ResidualDetail(residual=float("nan"), gap=0.0, n_vertices=0, flagged=True)
    m = fld.simplex_nodes[j]
    phi = fld.values[a, j]
    target = -(_time_derivative(fld, a, j) + hamiltonian_values(model, m, phi))
    poly = optimality_polytope(model, m, phi)
    fw = frank_wolfe(poly.vertices @ D, target)
    return ResidualDetail(residual=fw.distance, gap=fw.gap, n_vertices=len(poly), flagged=False)


def master_residual(model: GameModel, fld: MasterField, a: int, j: int) -> float:
    """Residual at interior time node ``a`` and simplex node ``j``; NaN at flagged nodes."""
    return master_residual_detail(model, fld, a, j).residual


def residual_table(model: GameModel, fld: MasterField) -> list[tuple[int, int, float, bool]]:
    rows = []
    for a in range(1, len(fld.time_nodes) - 1):
        for j in range(len(fld.simplex_nodes)):
            det = master_residual_detail(model, fld, a, j)
            rows.append((a, j, det.residual, det.flagged))
    return rows


def max_interior_residual(model: GameModel, fld: MasterField) -> float:
    vals = [r for _, _, r, f in residual_table(model, fld) if not f]
    return max(vals) if vals else float("nan")


def residuals_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["t_index", "node_index", "residual", "flagged"])
    for a, j, r, f in rows:
        writer.writerow([a, j, format(float(r), ".17g"), int(f)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# building a field from the solver


@dataclass(frozen=True)
class FieldOptions:
    Nt: int = 5
    divisions: int = 4
    starts: int = 2
    seed: int = 0
    N: int = 400  # solver steps for the full horizon; shorter horizons scale down
    t_start: float = 0.0
    max_iters: int = 2000
    tol_J: float = 1e-4

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _solve_node(item, model, opts):
    t, m = item
    steps = max(20, int(round(opts.N * (model.horizon_T - t) / (model.horizon_T - opts.t_start))))
    sopts = SolveOptions(N=steps, max_iters=opts.max_iters, tol_J=opts.tol_J, seed=opts.seed)
    reports = multi_start_solve(model, t, m, sopts, starts=opts.starts, jobs=1)
    return [r.phi0.copy() for r in reports if r.converged]


def build_field_from_solver(model: GameModel, opts: FieldOptions | None = None, jobs: int | None = None) -> MasterField:
    opts = opts or FieldOptions()
    T = model.horizon_T
    if not opts.t_start < T:
        raise ValueError(f"t_start {opts.t_start} must be before the horizon {T}")
    tn = np.linspace(opts.t_start, T, opts.Nt)
    tn[-1] = T
    nodes = simplex_grid(model.d, opts.divisions)
    Nt, Ns, d = len(tn), len(nodes), model.d
    values = np.full((Nt, Ns, d), np.nan)
    multi = np.zeros((Nt, Ns), dtype=bool)
    unsolved = np.zeros((Nt, Ns), dtype=bool)
    values[-1] = model.terminal(nodes)
    items = [(float(tn[a]), nodes[j]) for a in range(Nt - 1) for j in range(Ns)]
    results = parallel_map(functools.partial(_solve_node, model=model, opts=opts), items, jobs)
    for k, phis in enumerate(results):
        a, j = divmod(k, Ns)
        if not phis:
            unsolved[a, j] = True
            continue
        values[a, j] = phis[0]
        multi[a, j] = len(phis) > 1
    cfg = {"model": model.name, **opts.as_dict()}
    return MasterField(time_nodes=tn, divisions=opts.divisions, values=values, multivalued=multi,
                       unsolved=unsolved, simplex_nodes=nodes, config=cfg)


# ---------------------------------------------------------------------------
# constructing a trajectory from a field


def _nearest_node(fld: MasterField, t: float, m) -> tuple[int, int]:
    a = int(np.argmin(np.abs(fld.time_nodes - t)))
    a = min(max(a, 1), len(fld.time_nodes) - 2)
    j = int(np.argmin(np.sum((fld.simplex_nodes - np.asarray(m)) ** 2, axis=1)))
    return a, j


def construct_from_field(model: GameModel, fld: MasterField, t0: float, m0, steps: int = 200,
                         tolerances: Tolerances | None = None) -> SolveReport:
    """Follow the field forward from ``(t0, m0)`` with a minimal-residual selector.

    At every step the relaxed control is the mixture of argmax selections
    whose drift best fits the master equation at the nearest field node;
    ``phi`` is read off the interpolated field.  The certificate uses
    ``tolerances`` (``tol_J = 1e-2`` and residual tolerance ``5e-2`` by
    default, since interpolation error dominates).
    """
    m0 = as_simplex(m0, model.d, "m0")
    tol = tolerances or Tolerances(tol_J=1e-2, tol_residual=5e-2, tol_support=1e-6)
    grid = uniform_grid(t0, model.horizon_T, steps)
    d, K = model.d, model.K
    weights = np.zeros((steps, d, K))
    m_traj = np.empty((steps + 1, d))
    m = m_traj[0] = m0
    for n in range(steps):
        t = float(grid[n])
        stencil = fld.stencil(t, m)
        for a, j, _ in stencil:
            if fld.flagged[a, j]:
                raise SelectorResidualError(
                    f"field node (t_index={a}, node={j}) near t={t:.6g}, m={m.tolist()} is "
                    f"{'multivalued' if fld.multivalued[a, j] else 'unsolved'}")
        phi = fld.interpolate(t, m)
        a, j = _nearest_node(fld, t, m)
        D, _ = _tangential_derivative(fld, a, j)
        target = -(_time_derivative(fld, a, j) + hamiltonian_values(model, m, phi))
        poly = optimality_polytope(model, m, phi)
        fw = frank_wolfe(poly.vertices @ D, target)
        node_res = master_residual(model, fld, a, j)
        limit = 10.0 * ((0.0 if np.isnan(node_res) else node_res) + fld.h)
        if fw.distance > limit:
            raise SelectorResidualError(
                f"selector residual {fw.distance:.3g} exceeds {limit:.3g} at t={t:.6g}, m={m.tolist()}")
        for lam, sel in zip(fw.weights, poly.selections):
            if lam > 0.0:
                weights[n, np.arange(d), list(sel)] += lam
        weights[n] /= weights[n].sum(axis=-1, keepdims=True)
        m = _forward_m_steps(model, weights[n:n + 1], grid[n + 1:n + 2] - grid[n:n + 1], m)[-1]
        m_traj[n + 1] = m

    profile = RelaxedStrategyProfile(grid, weights)
    phi = np.array([fld.interpolate(float(t), mt) for t, mt in zip(grid, m_traj)])
    mu = integrate_forward_mu(model, profile, m_traj, uniform(d))
    z = integrate_z(model, profile, m_traj, phi, mu, anchor="forward")
    bundle = TrajectoryBundle(time_grid=grid, m=m_traj, phi=phi, mu=mu, z=z, profile=profile)
    cert = verify_solution(model, bundle, tol)
    return SolveReport(bundle=bundle, certificate=cert, iterations=0, J_history=[cert.J],
                       scheme="field-selector", seed=0, converged=cert.certified)
