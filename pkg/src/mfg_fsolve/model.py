"""Game data: state space, control grid, polynomial rate/reward tables.

Every coefficient (rates ``Q``, running rewards ``g``, terminal rewards
``sigma``) is a polynomial of degree <= 2 in the population distribution
``m``.  Internally each table is stored against the monomial feature vector
``[1, m_1..m_d, m_1 m_1, m_1 m_2, ..., m_d m_d]`` so that evaluation at one
point or at a batch of points is a single matrix product.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DegenerateMassError, ModelParseError, ModelValidationError, SimplexError

SIMPLEX_EPS = 1e-9
Q_OFFDIAG_TOL = 1e-12
Q_ROWSUM_TOL = 1e-10

BUILTIN_PREFIX = "builtin:"


@dataclass(frozen=True)
class ControlGrid:
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ModelValidationError("control grid must contain at least one control")
        if len(set(self.labels)) != len(self.labels):
            raise ModelValidationError(f"control labels must be unique: {list(self.labels)}")

    @property
    def K(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)


def n_features(d: int) -> int:
    return 1 + d + d * d


def features(m: np.ndarray) -> np.ndarray:
    """Monomial features of ``m`` with shape ``(..., d) -> (..., 1 + d + d^2)``."""
    m = np.asarray(m, dtype=float)
    outer = m[..., :, None] * m[..., None, :]
    ones = np.ones(m.shape[:-1] + (1,))
    return np.concatenate([ones, m, outer.reshape(m.shape[:-1] + (-1,))], axis=-1)


@dataclass(frozen=True, eq=False)
class GameModel:
    """Immutable finite-state game.

    ``q_coef`` has shape ``(F, K, d, d)``, ``g_coef`` ``(F, K, d)`` and
    ``sigma_coef`` ``(F, d)`` with ``F = 1 + d + d^2``.  Use
    :func:`model_from_dict` or :func:`load_model` rather than building one
    by hand; those run the validation.
    """

    d: int
    horizon_T: float
    controls: ControlGrid
    q_coef: np.ndarray
    g_coef: np.ndarray
    sigma_coef: np.ndarray
    name: str = ""
    source: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for arr in (self.q_coef, self.g_coef, self.sigma_coef):
            arr.setflags(write=False)
        F = n_features(self.d)
        K = self.controls.K
        object.__setattr__(self, "_q_flat", np.ascontiguousarray(self.q_coef.reshape(F, K * self.d * self.d)))
        object.__setattr__(self, "_g_flat", np.ascontiguousarray(self.g_coef.reshape(F, K * self.d)))

    @property
    def K(self) -> int:
        return self.controls.K

    # Vectorized evaluation; leading axes of ``m`` broadcast.

    def rates(self, m) -> np.ndarray:
        """All pure-control rate matrices, ``(..., d) -> (..., K, d, d)``."""
        f = features(m)
        return (f @ self._q_flat).reshape(f.shape[:-1] + (self.K, self.d, self.d))

    def rewards(self, m) -> np.ndarray:
        """All pure-control running rewards, ``(..., d) -> (..., K, d)``."""
        f = features(m)
        return (f @ self._g_flat).reshape(f.shape[:-1] + (self.K, self.d))

    def terminal(self, m) -> np.ndarray:
        """Terminal reward vector ``sigma(m)``, ``(..., d) -> (..., d)``."""
        return features(m) @ self.sigma_coef

    def to_dict(self) -> dict:
        return self.source


# ---------------------------------------------------------------------------
# scalar evaluators


def eval_Q(model: GameModel, i: int, j: int, m, u: int) -> float:
    return float(model.rates(m)[u, i, j])


def eval_g(model: GameModel, i: int, m, u: int) -> float:
    return float(model.rewards(m)[u, i])


def eval_sigma(model: GameModel, m) -> np.ndarray:
    return model.terminal(m)


# ---------------------------------------------------------------------------
# simplex arithmetic


def is_simplex(v, eps: float = SIMPLEX_EPS) -> bool:
    v = np.asarray(v, dtype=float)
    return bool(v.ndim >= 1 and v.shape[-1] >= 1 and np.all(np.isfinite(v)) and np.all(v >= -eps)
                and np.all(np.abs(v.sum(axis=-1) - 1.0) <= eps))


def as_simplex(v, d: int | None = None, name: str = "vector") -> np.ndarray:
    """Validate ``v`` as a probability vector and return it as a float array."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1:
        raise SimplexError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if d is not None and arr.shape[0] != d:
        raise SimplexError(f"{name} has {arr.shape[0]} entries, model has d={d}")
    if not is_simplex(arr):
        raise SimplexError(
            f"{name}={arr.tolist()} is not a probability vector "
            f"(entries >= -{SIMPLEX_EPS:g}, sum within {SIMPLEX_EPS:g} of 1; sum={float(arr.sum())!r})")
    return arr


def renormalize(v) -> np.ndarray:
    """Project an integrator iterate back onto the simplex.

    Negative entries are clipped and the result rescaled to unit mass.  A
    nonnegative input whose mass is already 1 to within a few ulps is returned
    unchanged, which makes the map exactly idempotent.  Works row-wise on
    ``(..., d)`` arrays.
    """
    v = np.asarray(v, dtype=float)
    total = v.sum(axis=-1, keepdims=True)
    if np.any(~(total > 0.5)):
        raise DegenerateMassError(f"total mass {np.min(total)!r} <= 0.5; integrator blew up")
    if np.all(v >= 0.0) and np.all(np.abs(total - 1.0) <= 1e-13):
        return v.copy()
    w = np.maximum(v, 0.0)
    return w / w.sum(axis=-1, keepdims=True)


def uniform(d: int) -> np.ndarray:
    return np.full(d, 1.0 / d)


def simplex_grid(d: int, divisions: int) -> np.ndarray:
    """All points of the simplex whose coordinates are multiples of ``1/divisions``.

    Returned in lexicographic order of the integer compositions, shape
    ``(n_points, d)``.
    """
    pts = [c for c in itertools.product(range(divisions + 1), repeat=d) if sum(c) == divisions]
    return np.array(pts, dtype=float) / divisions


# ---------------------------------------------------------------------------
# parsing


def _poly(obj, d: int, where: str) -> np.ndarray:
    if isinstance(obj, (int, float)) and not isinstance(obj, bool):
        obj = {"c": obj}
    if not isinstance(obj, dict) or "c" not in obj:
        raise ModelParseError(f"{where}: polynomial must be an object with field 'c'")
    unknown = set(obj) - {"c", "lin", "quad"}
    if unknown:
        raise ModelParseError(f"{where}: unknown polynomial fields {sorted(unknown)}")
    try:
        c = float(obj["c"])
        lin = np.asarray(obj.get("lin", np.zeros(d)), dtype=float)
        quad = np.asarray(obj.get("quad", np.zeros((d, d))), dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelParseError(f"{where}: non-numeric coefficient ({exc})") from None
    if lin.shape != (d,):
        raise ModelParseError(f"{where}: 'lin' must have length {d}, got shape {lin.shape}")
    if quad.shape != (d, d):
        raise ModelParseError(f"{where}: 'quad' must be {d}x{d}, got shape {quad.shape}")
    coef = np.concatenate([[c], lin, quad.ravel()])
    if not np.all(np.isfinite(coef)):
        raise ModelValidationError(f"{where}: coefficients must be finite")
    return coef


def model_from_dict(data: dict, name: str = "") -> GameModel:
    """Build and validate a :class:`GameModel` from the JSON document layout."""
    if not isinstance(data, dict):
        raise ModelParseError("model document must be a JSON object")
    for key in ("d", "T", "controls", "Q", "g", "sigma"):
        if key not in data:
            raise ModelParseError(f"missing field '{key}'")
    d = data["d"]
    if not isinstance(d, int) or isinstance(d, bool) or d < 1:
        raise ModelParseError(f"'d' must be a positive integer, got {d!r}")
    try:
        T = float(data["T"])
    except (TypeError, ValueError):
        raise ModelParseError(f"'T' must be a number, got {data['T']!r}") from None
    if not (np.isfinite(T) and T > 0):
        raise ModelValidationError(f"'T' must be positive and finite, got {T!r}")
    labels = data["controls"]
    if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
        raise ModelParseError("'controls' must be an array of strings")
    controls = ControlGrid(tuple(labels))
    K = controls.K
    F = n_features(d)

    Qmap, gmap = data["Q"], data["g"]
    if not isinstance(Qmap, dict) or not isinstance(gmap, dict):
        raise ModelParseError("'Q' and 'g' must be objects keyed by control label")
    for key, mp in (("Q", Qmap), ("g", gmap)):
        if set(mp) != set(labels):
            raise ModelParseError(f"'{key}' keys {sorted(mp)} do not match controls {sorted(labels)}")

    q_coef = np.zeros((F, K, d, d))
    g_coef = np.zeros((F, K, d))
    for k, lab in enumerate(labels):
        rows = Qmap[lab]
        if not isinstance(rows, list) or len(rows) != d or any(not isinstance(r, list) or len(r) != d for r in rows):
            raise ModelParseError(f"Q[{lab!r}] must be a {d}x{d} array")
        for i in range(d):
            for j in range(d):
                q_coef[:, k, i, j] = _poly(rows[i][j], d, f"Q[{lab!r}][{i + 1}][{j + 1}]")
        gs = gmap[lab]
        if not isinstance(gs, list) or len(gs) != d:
            raise ModelParseError(f"g[{lab!r}] must be an array of length {d}")
        for i in range(d):
            g_coef[:, k, i] = _poly(gs[i], d, f"g[{lab!r}][{i + 1}]")
    sig = data["sigma"]
    if not isinstance(sig, list) or len(sig) != d:
        raise ModelParseError(f"'sigma' must be an array of length {d}")
    sigma_coef = np.zeros((F, d))
    for i in range(d):
        sigma_coef[:, i] = _poly(sig[i], d, f"sigma[{i + 1}]")

    model = GameModel(d=d, horizon_T=T, controls=controls, q_coef=q_coef, g_coef=g_coef,
                      sigma_coef=sigma_coef, name=name or str(data.get("name", "")), source=data)
    validate_model(model)
    return model


def validate_model(model: GameModel) -> None:
    """Check the Q-matrix property on the quarter-step simplex grid for every control."""
    grid = simplex_grid(model.d, 4)
    Q = model.rates(grid)  # (P, K, d, d)
    d = model.d
    off = ~np.eye(d, dtype=bool)
    for p, k, i, j in zip(*np.nonzero((Q < -Q_OFFDIAG_TOL) & off)):
        raise ModelValidationError(
            f"negative off-diagonal rate Q[{i + 1},{j + 1}] = {Q[p, k, i, j]!r} for control "
            f"{model.controls.labels[k]!r} at m={grid[p].tolist()}")
    rowsum = Q.sum(axis=-1)
    for p, k, i in zip(*np.nonzero(np.abs(rowsum) > Q_ROWSUM_TOL)):
        raise ModelValidationError(
            f"row {i + 1} of Q for control {model.controls.labels[k]!r} sums to {rowsum[p, k, i]!r} "
            f"(must be 0) at m={grid[p].tolist()}")


def load_model(path) -> GameModel:
    """Load a model from a JSON file, or from the builtin registry (``builtin:<name>``)."""
    source = str(path)
    if source.startswith(BUILTIN_PREFIX):
        return builtin_model(source[len(BUILTIN_PREFIX):])
    p = Path(source)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ModelParseError(f"cannot read model file {source}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"{source}: invalid JSON ({exc})") from None
    return model_from_dict(data, name=p.stem)


def builtin_names() -> list[str]:
    root = resources.files("mfg_fsolve") / "models"
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".json"))


def builtin_model(name: str) -> GameModel:
    root = resources.files("mfg_fsolve") / "models"
    f = root / f"{name}.json"
    if not f.is_file():
        raise ModelParseError(f"unknown builtin model {name!r}; available: {builtin_names()}")
    return model_from_dict(json.loads(f.read_text(encoding="utf-8")), name=name)
