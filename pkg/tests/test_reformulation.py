import json
import warnings

import numpy as np
import pytest

from helpers import random_dirac_profile, random_model, random_relaxed_profile, random_simplex
from oracles import brute_force_best_payoff, reference_flow
from mfg_fsolve.dynamics import roll_bundle
from mfg_fsolve.reformulation import (Tolerances, cost_J, cost_Jk, cost_Jk_all, cost_Jprime, report_to_json,
                                      verify_solution)
from mfg_fsolve.relaxed import dirac_profile, uniform_grid


def _switch_bundle(model, choice, m0, mu0, N=1000):
    prof = dirac_profile(uniform_grid(0.0, 1.0, N), np.tile(choice, (N, 1)), model.K)
    return roll_bundle(model, prof, 0.0, m0, mu0)


def test_all_stay_exploitability_matches_brute_force(switch_model):
    b = _switch_bundle(switch_model, [0, 0], [1.0, 0.0], [0.5, 0.5])
    Qs = switch_model.rates(np.array([1.0, 0.0]))
    best = brute_force_best_payoff(Qs, [1.0, 0.0], 1.0, [0.5, 0.5], pieces=8)
    stay_payoff = 0.5  # nobody moves, so the tagged player ends where it started
    assert cost_J(switch_model, b) == pytest.approx(best - stay_payoff, abs=1e-6)
    assert cost_J(switch_model, b) == pytest.approx(0.5 * (1.0 - np.exp(-1.0)), abs=1e-6)
    np.testing.assert_allclose(cost_Jk_all(switch_model, b), [0.0, 1.0 - np.exp(-1.0)], atol=1e-6)


def test_equilibrium_is_certified(switch_model):
    b = _switch_bundle(switch_model, [0, 1], [1.0, 0.0], [0.5, 0.5])
    rep = verify_solution(switch_model, b)
    assert rep.certified and rep.verdict == "certified"
    assert abs(rep.J) < 1e-10
    assert rep.support_violation == 0.0
    assert rep.boundary_m0
    assert rep.J_prime is None


def test_non_equilibrium_is_rejected(switch_model):
    b = _switch_bundle(switch_model, [1, 1], [1.0, 0.0], [1.0, 0.0])
    rep = verify_solution(switch_model, b)
    assert not rep.certified
    assert rep.J > 1e-2
    assert rep.support_violation > 0
    assert rep.J_prime is not None and rep.J_prime == pytest.approx(rep.J, abs=1e-12)


def test_J_nonnegative_random(rng):
    for _ in range(30):
        model = random_model(rng)
        prof = random_dirac_profile(rng, model, 0.0, 300)
        b = roll_bundle(model, prof, 0.0, random_simplex(rng, model.d), random_simplex(rng, model.d))
        assert cost_J(model, b) >= -1e-7


def test_decomposition_identity(rng):
    for _ in range(10):
        model = random_model(rng)
        prof = random_relaxed_profile(rng, model, 0.0, 200)
        mu0 = random_simplex(rng, model.d)
        b = roll_bundle(model, prof, 0.0, random_simplex(rng, model.d), mu0)
        Jk = np.array([cost_Jk(model, b, k) for k in range(model.d)])
        np.testing.assert_allclose(Jk, cost_Jk_all(model, b), atol=1e-13)
        assert abs(cost_J(model, b) - mu0 @ Jk) <= 1e-10
        assert np.all(Jk >= -1e-7)


def test_J_against_reference_reward(rng):
    model = random_model(rng, d=3, K=2)
    prof = random_dirac_profile(rng, model, 0.0, 400, pieces=5)
    m0, mu0 = random_simplex(rng, 3), random_simplex(rng, 3)
    b = roll_bundle(model, prof, 0.0, m0, mu0)
    _, mu, I = reference_flow(model, prof, m0, mu0)
    ref = mu0 @ b.phi[0] - mu[-1] @ model.terminal(b.m[-1]) - I[-1]
    assert cost_J(model, b) == pytest.approx(ref, abs=1e-9)
    assert b.z[-1] == pytest.approx(cost_J(model, b), abs=1e-12)


def test_Jprime_and_warning(rng, crowd_model):
    prof = random_relaxed_profile(rng, crowd_model, 0.0, 200)
    m0 = np.array([0.6, 0.2, 0.2])
    b = roll_bundle(crowd_model, prof, 0.0, m0, m0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert cost_Jprime(crowd_model, b) == pytest.approx(cost_J(crowd_model, b), abs=1e-12)
    b2 = roll_bundle(crowd_model, prof, 0.0, m0, [0.2, 0.2, 0.6])
    with pytest.warns(UserWarning):
        cost_Jprime(crowd_model, b2)
    with pytest.raises(IndexError):
        cost_Jk(crowd_model, b, 3)


def test_tolerances_drive_verdict(switch_model):
    b = _switch_bundle(switch_model, [0, 1], [1.0, 0.0], [0.5, 0.5], N=50)
    assert verify_solution(switch_model, b, Tolerances(tol_residual=1e-3)).certified
    assert not verify_solution(switch_model, b, Tolerances(tol_residual=1e-14)).certified


def test_report_json(switch_model):
    b = _switch_bundle(switch_model, [0, 1], [1.0, 0.0], [0.5, 0.5])
    rep = verify_solution(switch_model, b)
    doc = json.loads(report_to_json(rep, meta={"model": "two-state-switch"}))
    assert doc["verdict"] == "certified"
    assert doc["meta"]["model"] == "two-state-switch"
    assert set(doc["tolerances"]) == {"tol_J", "tol_residual", "tol_support"}
    assert len(doc["J_k"]) == 2


def test_trivial_model_certificate():
    from mfg_fsolve.model import builtin_model
    from mfg_fsolve.relaxed import uniform_profile
    model = builtin_model("trivial")
    b = roll_bundle(model, uniform_profile(uniform_grid(0.0, 1.0, 100), 2, 1), 0.0, [0.3, 0.7], [0.5, 0.5])
    rep = verify_solution(model, b)
    assert rep.certified and rep.J == 0.0
    assert max(rep.bellman_residual, rep.kolmogorov_residual, rep.terminal_residual) <= 1e-12


def test_J_converges_under_refinement(rng):
    model = random_model(rng, d=2, K=2, T=1.0)
    Js = []
    for N in (40, 80, 160):
        # the same piecewise-constant control (switches at multiples of T/4), refined
        grid = uniform_grid(0.0, 1.0, N)
        choices = np.array([[0, 1], [1, 0], [1, 1], [0, 0]])[np.minimum(np.arange(N) * 4 // N, 3)]
        Js.append(cost_J(model, roll_bundle(model, dirac_profile(grid, choices, 2), 0.0, [0.4, 0.6], [0.5, 0.5])))
    diffs = [abs(Js[0] - Js[1]), abs(Js[1] - Js[2])]
    assert diffs[1] <= diffs[0] / 4 or diffs[1] < 1e-12


def test_equilibrium_Jk_vanish(switch_model):
    b = _switch_bundle(switch_model, [0, 1], [1.0, 0.0], [0.5, 0.5])
    assert np.max(np.abs(cost_Jk_all(switch_model, b))) <= 1e-5
