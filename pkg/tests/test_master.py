import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from oracles import hull_distance
from mfg_fsolve.errors import CapExceededError, GridMismatchError, SelectorResidualError
from mfg_fsolve.master import (FieldOptions, MasterField, build_field_from_solver, construct_from_field,
                               field_from_json, field_to_json, frank_wolfe, master_residual,
                               master_residual_detail, max_interior_residual, optimality_polytope,
                               residual_table, residuals_to_csv)
from mfg_fsolve.model import builtin_model, model_from_dict, simplex_grid
from mfg_fsolve.solver import SolveOptions, solve_fictitious_play


def _field(values_fn, d, divisions, Nt, T=1.0):
    tn = np.linspace(0.0, T, Nt)
    nodes = simplex_grid(d, divisions)
    vals = np.array([[values_fn(t, m) for m in nodes] for t in tn])
    shape = (Nt, len(nodes))
    return MasterField(time_nodes=tn, divisions=divisions, values=vals, multivalued=np.zeros(shape, bool),
                       unsolved=np.zeros(shape, bool), simplex_nodes=nodes)


def _linear_game():
    Q = np.array([[-1.0, 0.7, 0.3], [0.2, -0.5, 0.3], [0.4, 0.4, -0.8]])
    S = np.array([[1.0, -0.5, 0.2], [0.0, 0.3, -1.0], [0.6, 0.1, 0.0]])  # sigma(m) = S m
    doc = {"d": 3, "T": 1.0, "controls": ["only"],
           "Q": {"only": [[{"c": float(q)} for q in row] for row in Q]},
           "g": {"only": [0.0, 0.0, 0.0]},
           "sigma": [{"c": 0.0, "lin": S[i].tolist()} for i in range(3)]}

    def exact(t, m):
        E = expm((1.0 - t) * Q)
        return E @ (S @ (np.asarray(m) @ E))
    return model_from_dict(doc), exact


# -- Frank-Wolfe ---------------------------------------------------------

def test_frank_wolfe_matches_exact_hull_distance(rng):
    for _ in range(200):
        P = rng.normal(size=(int(rng.integers(1, 10)), int(rng.integers(1, 5))))
        y = rng.normal(size=P.shape[1]) * 2
        fw = frank_wolfe(P, y)
        assert fw.distance == pytest.approx(hull_distance(P, y), abs=1e-9)
        assert fw.iterations < 200
        assert fw.weights.min() >= 0 and fw.weights.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(fw.weights @ P, fw.point, atol=1e-12)


def test_frank_wolfe_inside_hull_is_zero():
    P = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    fw = frank_wolfe(P, [0.2, 0.3])
    assert fw.distance < 1e-9
    np.testing.assert_allclose(fw.point, [0.2, 0.3], atol=1e-9)


# -- optimality polytope ---------------------------------------------------

def test_polytope_enumerates_ties(switch_model):
    m = np.array([0.5, 0.5])
    tie = optimality_polytope(switch_model, m, np.array([0.3, 0.3]))
    assert len(tie) == 4
    np.testing.assert_allclose(sorted(map(tuple, tie.vertices)), [(-0.5, 0.5), (0.0, 0.0), (0.0, 0.0), (0.5, -0.5)])
    strict = optimality_polytope(switch_model, m, np.array([1.0, 0.0]))
    assert strict.selections == ((0, 1),)
    np.testing.assert_allclose(strict.vertices[0], [0.5, -0.5])


def test_polytope_cap():
    K, d = 17, 3
    rows = [[{"c": -1.0 if i == j else 0.5} for j in range(d)] for i in range(d)]
    doc = {"d": d, "T": 1.0, "controls": [f"c{k}" for k in range(K)],
           "Q": {f"c{k}": rows for k in range(K)}, "g": {f"c{k}": [0.0] * d for k in range(K)},
           "sigma": [0.0] * d}
    model = model_from_dict(doc)
    with pytest.raises(CapExceededError, match="4913"):
        optimality_polytope(model, np.full(3, 1 / 3), np.zeros(3))


# -- interpolation -----------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), d=st.integers(2, 4), n=st.integers(1, 5))
def test_interpolation_exact_for_affine_fields(seed, d, n):
    rng = np.random.default_rng(seed)
    A, B, c = rng.normal(size=(d, d)), rng.normal(size=d), rng.normal(size=d)
    fld = _field(lambda t, m: A @ m + t * B + c, d, n, 4)
    for _ in range(5):
        t = rng.uniform(0, 1)
        m = rng.dirichlet(np.ones(d) * 0.5)
        np.testing.assert_allclose(fld.interpolate(t, m), A @ m + t * B + c, atol=1e-10)
        idx, w = fld.simplex_stencil(m)
        assert len(idx) <= d and np.all(w > 0) and w.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(w @ fld.simplex_nodes[idx], m, atol=1e-12)


def test_interpolation_reproduces_nodes(rng):
    fld = _field(lambda t, m: np.sin(3 * m) + t, 3, 4, 5)
    for a, t in enumerate(fld.time_nodes):
        for j, m in enumerate(fld.simplex_nodes):
            np.testing.assert_allclose(fld.interpolate(t, m), fld.values[a, j], atol=1e-12)
    with pytest.raises(ValueError):
        fld.interpolate(1.5, fld.simplex_nodes[0])


def test_field_shape_checks():
    with pytest.raises(ValueError):
        _field(lambda t, m: m, 2, 2, 2)
    fld = _field(lambda t, m: m, 2, 2, 3)
    with pytest.raises(GridMismatchError):
        MasterField(time_nodes=fld.time_nodes, divisions=3, values=fld.values, multivalued=fld.multivalued,
                    unsolved=fld.unsolved)


# -- residuals ---------------------------------------------------------------

def test_residual_of_exact_linear_field_is_second_order_in_time():
    model, exact = _linear_game()
    res = []
    for Nt in (6, 11, 21):
        fld = _field(exact, 3, 3, Nt)
        res.append(max_interior_residual(model, fld))
    assert res[0] < 0.1
    assert res[0] / res[1] > 3.0 and res[1] / res[2] > 3.0


def test_residual_detects_wrong_field():
    model, exact = _linear_game()
    good = _field(exact, 3, 3, 21)
    bad = _field(lambda t, m: exact(t, m) + 0.3 * m, 3, 3, 21)
    assert max_interior_residual(model, bad) > 10 * max_interior_residual(model, good)


def test_trivial_field_has_zero_residual():
    model = builtin_model("trivial")
    fld = _field(lambda t, m: np.zeros(2), 2, 4, 5)
    assert max_interior_residual(model, fld) == 0.0


def test_flagged_nodes_give_nan():
    model, exact = _linear_game()
    fld = _field(exact, 3, 3, 5)
    fld.multivalued[2, 0] = True
    det = master_residual_detail(model, fld, 2, 0)
    assert det.flagged and np.isnan(det.residual)
    assert np.isnan(master_residual(model, fld, 1, 0))  # time neighbour is flagged
    rows = residual_table(model, fld)
    assert len(rows) == 3 * len(fld.simplex_nodes)
    assert np.isfinite(max_interior_residual(model, fld))
    with pytest.raises(ValueError):
        master_residual(model, fld, 0, 0)
    text = residuals_to_csv(rows)
    assert text.startswith("t_index,node_index,residual,flagged\r\n")


def test_json_roundtrip():
    model, exact = _linear_game()
    fld = _field(exact, 3, 3, 4)
    fld.unsolved[1, 2] = True
    fld.values[1, 2] = np.nan
    back = field_from_json(field_to_json(fld))
    np.testing.assert_array_equal(back.values, fld.values)
    np.testing.assert_array_equal(back.unsolved, fld.unsolved)
    assert back.divisions == 3 and json.loads(field_to_json(fld))["mesh"] == pytest.approx(1 / 3)


# -- solver-built fields and trajectory construction -------------------------

@pytest.fixture(scope="module")
def short_field():
    model = builtin_model("short-horizon-d2")
    return model, build_field_from_solver(model, FieldOptions(Nt=5, divisions=4))


def test_build_field(short_field):
    model, fld = short_field
    assert not fld.flagged.any()
    np.testing.assert_allclose(fld.values[-1], model.terminal(fld.simplex_nodes))
    assert fld.config["model"] == "short-horizon-d2"
    assert max_interior_residual(model, fld) < 0.2


def test_construct_matches_direct_solve(short_field):
    model, fld = short_field
    rep = construct_from_field(model, fld, 0.0, [0.3, 0.7])
    direct = solve_fictitious_play(model, 0.0, [0.3, 0.7], SolveOptions(N=1000))
    assert direct.converged
    assert np.max(np.abs(rep.phi0 - direct.phi0)) < 2e-2
    assert rep.scheme == "field-selector"
    assert rep.bundle.m.shape == (201, 2)


def test_construct_refuses_flagged_field(short_field):
    model, fld = short_field
    flagged = field_from_json(field_to_json(fld))
    flagged.multivalued[:] = True
    with pytest.raises(SelectorResidualError):
        construct_from_field(model, flagged, 0.0, [0.3, 0.7])


def test_field_marks_multivalued_nodes():
    model = builtin_model("two-state-switch")
    fld = build_field_from_solver(model, FieldOptions(Nt=3, divisions=2, starts=4, N=1000, max_iters=60))
    j = fld.node_index([1, 1])
    assert fld.multivalued[0, j]
    assert not fld.multivalued[0, fld.node_index([2, 0])]


def test_polytope_vertices_attain_hamiltonian(rng):
    from helpers import random_model
    from mfg_fsolve.relaxed import hamiltonian_values
    model = random_model(rng, d=3, K=3)
    m = rng.dirichlet(np.ones(3))
    # phi = 0 with equal rewards makes every control tie
    phi = np.zeros(3)
    poly = optimality_polytope(model, m, phi)
    H = hamiltonian_values(model, m, phi)
    R, G = model.rates(m), model.rewards(m)
    for v, sel in zip(poly.vertices, poly.selections):
        scores = np.array([R[sel[i], i] @ phi + G[sel[i], i] for i in range(3)])
        np.testing.assert_allclose(scores, H, atol=1e-10)
        assert abs(v.sum()) < 1e-10


def test_distance_ignores_vertex_order(rng):
    P = rng.normal(size=(7, 3))
    y = rng.normal(size=3) * 3
    base = frank_wolfe(P, y).distance
    for _ in range(5):
        assert frank_wolfe(P[rng.permutation(7)], y).distance == pytest.approx(base, abs=1e-12)


def test_residual_sensitive_to_perturbation():
    model, exact = _linear_game()
    fld = _field(exact, 3, 4, 9)
    base = {(a, j): master_residual(model, fld, a, j) for a in range(1, 8) for j in range(len(fld.simplex_nodes))}
    a0, j0 = 4, fld.node_index([2, 1, 1])
    fld.values[a0, j0, 0] += 1.0
    c0 = fld.composition(j0)
    neighbours = [(a0, j0), (a0 - 1, j0), (a0 + 1, j0)]
    for step in ([1, -1, 0], [-1, 1, 0], [1, 0, -1], [-1, 0, 1], [0, 1, -1], [0, -1, 1]):
        j = fld.node_index(c0 + np.array(step))
        if j is not None:
            neighbours.append((a0, j))
    increase = max(master_residual(model, fld, a, j) - base[(a, j)] for a, j in neighbours)
    assert increase >= 0.1 / fld.h


def test_constructed_terminal_value_within_interpolation_error(short_field):
    model, fld = short_field
    rep = construct_from_field(model, fld, 0.0, [0.3, 0.7])
    lin = np.abs(model.sigma_coef[1:3]).sum(axis=0) + 2 * np.abs(model.sigma_coef[3:]).sum(axis=0)
    lip = float(np.max(lin))
    assert rep.certificate.terminal_residual <= 2 * fld.h * lip
