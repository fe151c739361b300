import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dqm.analysis import (
    AlphaRecoveryError,
    RateAssumptionError,
    RateParameters,
    approx_error,
    audit,
    dadmm_rate_limit,
    energy,
    optimal_certificate,
    rate_constant,
    recover_alpha,
    trace_hook,
    zeta,
)
from dqm.graph import SpectralData, build_random_graph, complete_graph, incidence_operators
from dqm.objective import ConsensusProblem, CurvatureEstimates, QuadraticLocal
from dqm.solvers import ReducedState, SolverConfig, run, run_full_form

from conftest import logistic, quadratic_problem


def column_residual(v, E):
    E = E.toarray()
    proj = E @ np.linalg.pinv(E.T @ E) @ E.T @ v
    return np.linalg.norm(v - proj)


def test_recover_alpha_of_zero(triangle_ops):
    assert np.all(recover_alpha(np.zeros(3), triangle_ops) == 0)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_recover_alpha_round_trip(seed):
    rng = np.random.default_rng(seed)
    net = build_random_graph(int(rng.integers(2, 8)), 0.6, seed, p=int(rng.integers(1, 3)))
    ops = incidence_operators(net)
    alpha0 = ops.E_o @ rng.standard_normal(net.n * net.p)
    alpha = recover_alpha(ops.E_o.T @ alpha0, ops)
    assert np.linalg.norm(alpha - alpha0) <= 1e-9 * max(1, np.linalg.norm(alpha0))


def test_recover_alpha_rejects_phi_outside_column_space(triangle_ops):
    with pytest.raises(AlphaRecoveryError, match="column space"):
        recover_alpha(np.array([1.0, 0.0, 0.0]), triangle_ops)


def test_recover_alpha_matches_full_form_multipliers():
    pr = logistic(5, 2, seed=3, reg=0.1)
    ops = incidence_operators(pr.network)
    cfg = SolverConfig("DQM", 0.8, max_iter=40)
    red = run("DQM", pr, cfg, keep_states=True, ops=ops).states
    full = run_full_form("DQM", pr, cfg, ops=ops)
    for r, f in zip(red, full):
        assert np.linalg.norm(recover_alpha(r.phi, ops) - f.alpha) <= 1e-9


def test_certificate_equal_targets_has_zero_multiplier():
    b = np.array([0.3, -1.0])
    pr = ConsensusProblem(complete_graph(4), [QuadraticLocal(b)] * 4)
    ops = incidence_operators(pr.network)
    cert = optimal_certificate(pr, ops)
    np.testing.assert_allclose(cert.x_star, np.tile(b, (4, 1)), atol=1e-15)
    assert np.linalg.norm(cert.alpha_star) <= 1e-14


def test_certificate_triangle_least_squares(triangle):
    b = np.array([[1.0], [4.0], [-2.0]])
    pr = ConsensusProblem(triangle, [QuadraticLocal(bi) for bi in b])
    ops = incidence_operators(pr.network)
    cert = optimal_certificate(pr, ops)
    grad = (cert.x_star - b).ravel()
    # minimum-norm least squares oracle
    ref = -np.linalg.pinv(ops.E_o.T.toarray()) @ grad
    np.testing.assert_allclose(cert.alpha_star, ref, atol=1e-12)
    res = cert.residuals(pr, ops)
    assert res["kkt"] <= 1e-10
    assert res["consensus"] == 0 and res["primal"] <= 1e-14
    assert column_residual(cert.alpha_star, ops.E_o) <= 1e-9


def test_energy_definition(triangle_ops):
    pr = quadratic_problem(triangle_ops.network, 1, seed=0)
    cert = optimal_certificate(pr, triangle_ops)
    assert energy(cert.z_star, cert.alpha_star, cert, 3.0) == 0.0
    delta = np.zeros_like(cert.z_star)
    delta[0] = 1.0
    assert energy(cert.z_star + delta, cert.alpha_star, cert, 2.0) == 2.0
    assert energy(cert.z_star, cert.alpha_star + delta, cert, 2.0) == 0.5


@pytest.mark.parametrize("method", ["DQM", "DLM", "DADMM"])
def test_zero_displacement_has_zero_error(method):
    pr = logistic(5, 2, seed=1)
    x = np.random.default_rng(0).standard_normal((5, 2))
    e, bound = approx_error(method, pr, x, x, rho=1.0)
    assert np.all(e == 0) and bound == 0


def test_quadratic_dqm_error_vanishes(quad5):
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((2, 5, 2))
    e, bound = approx_error("DQM", quad5, x, y)
    assert np.all(e == 0) and bound == 0.0


@pytest.fixture
def quad5():
    return quadratic_problem(build_random_graph(5, 0.6, 4), 2, seed=5)


def test_error_vectors_match_definitions():
    pr = logistic(5, 2, seed=2, reg=0.1)
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((2, 5, 2))
    g = lambda v: np.stack([f.gradient(v[i]) for i, f in enumerate(pr.locals)])  # noqa: E731
    H = np.stack([f.hessian(x[i]) for i, f in enumerate(pr.locals)])
    d = y - x
    e, _ = approx_error("DQM", pr, x, y)
    np.testing.assert_allclose(e, g(x) + np.einsum("ipq,iq->ip", H, d) - g(y), atol=1e-12)
    e, bound = approx_error("DLM", pr, x, y, rho=2.5)
    np.testing.assert_allclose(e, g(x) + 2.5 * d - g(y), atol=1e-12)
    assert np.linalg.norm(e) <= bound


@pytest.fixture
def reg_setup():
    pr = logistic(10, 3, seed=3, reg=1.0)
    ops = incidence_operators(pr.network)
    return pr, ops, optimal_certificate(pr, ops)


def test_rate_constant_rejects_small_c(reg_setup):
    pr, ops, _ = reg_setup
    params = RateParameters.for_problem(pr, ops, 1.0)
    with pytest.raises(RateAssumptionError, match=r"c > 4M\^2"):
        rate_constant("DQM", params, 0.1)
    with pytest.raises(RateAssumptionError, match=r"\(rho\+M\)\^2"):
        rate_constant("DLM", params, 1.0)


def test_rate_constant_rejects_unregularized():
    pr = logistic(10, 3, seed=3)
    params = RateParameters.for_problem(pr, incidence_operators(pr.network), 1e6)
    with pytest.raises(RateAssumptionError, match="m > 0"):
        rate_constant("DQM", params, 0.1)


def test_rate_constant_rejects_eta_outside_interval(reg_setup):
    pr, ops, _ = reg_setup
    p0 = RateParameters.for_problem(pr, ops, 1.0)
    params = replace(p0, c=2 * p0.c_threshold("DQM"), eta=1e-9)
    with pytest.raises(RateAssumptionError, match="eta"):
        rate_constant("DQM", params, 0.5)


def synthetic_params(c_factor=2.0, **kw):
    curv = CurvatureEstimates(m=0.8, M=3.0, L=2.0)
    bounds = SpectralData(gamma_u=1.1, Gamma_u=3.2, gamma_o=1.5, bipartite_flag=False)
    thr = 4 * curv.M**2 / (curv.m * bounds.gamma_u**2)
    return RateParameters(c_factor * thr, curv, bounds, **kw)


@given(st.floats(1.01, 50.0), st.floats(1.001, 2.0), st.one_of(st.none(), st.floats(1.001, 3.0)),
       st.floats(0.0, 1.0))
@settings(max_examples=200, deadline=None)
def test_delta_positive_under_hypotheses(c_factor, mu, mu_prime, frac):
    params = synthetic_params(c_factor, mu=mu, mu_prime=mu_prime)
    z = frac * 2 * params.curvature.M
    assert rate_constant("DQM", params, z) > 0
    rho = frac * 4.0 + 0.01
    p_dlm = replace(params, c=c_factor * params.c_threshold("DLM", rho))
    assert rate_constant("DLM", p_dlm, rho) > 0


def test_delta_decreases_in_zeta_and_dlm_is_slower():
    params = synthetic_params(3.0)
    zs = np.linspace(0, 2 * params.curvature.M, 200)
    deltas = [rate_constant("DQM", params, z) for z in zs]
    assert all(a >= b for a, b in zip(deltas, deltas[1:]))
    rho = 1.0
    p_dlm = replace(params, c=3 * params.c_threshold("DLM", rho))
    d_dlm = rate_constant("DLM", p_dlm, rho)
    for z in np.linspace(0, rho + params.curvature.M, 50)[:-1]:
        assert rate_constant("DQM", p_dlm, z) > d_dlm


def test_zero_zeta_with_analytic_mu_prime_is_the_dadmm_limit():
    params = synthetic_params(2.0, mu_prime=None)
    assert rate_constant("DQM", params, 0.0) == pytest.approx(dadmm_rate_limit(params), rel=1e-14)
    assert rate_constant("DADMM", params, None) == dadmm_rate_limit(params)


def test_analytic_mu_prime_beats_any_grid_choice():
    params = synthetic_params(2.0, mu_prime=None)
    for z in (1e-3, 0.1, 1.0, 5.0):
        best = rate_constant("DQM", params, z)
        grid = [rate_constant("DQM", replace(params, mu_prime=mp), z)
                for mp in 1 + np.logspace(-6, 3, 2000)]
        assert best >= max(grid) * (1 - 1e-12)
        assert best <= max(grid) * (1 + 1e-3)


def test_dadmm_limit_formula():
    params = synthetic_params(2.0)
    c, mu = params.c, params.mu
    first = (mu - 1) * 1.5**2 / (mu * 3.2**2)
    second = 0.8 / (c * 3.2**2 / 4 + mu * 9.0 / (c * 1.5**2))
    assert dadmm_rate_limit(params) == pytest.approx(min(first, second), rel=1e-15)


def test_zeta_definition():
    curv = CurvatureEstimates(0.5, 2.0, 4.0)
    assert zeta(curv, 0.1) == pytest.approx(0.2)
    assert zeta(curv, 10.0) == 4.0


def run_states(pr, ops, method, c, rho=None, iters=150):
    cfg = SolverConfig(method, c, rho=rho, max_iter=iters)
    return run(method, pr, cfg, keep_states=True, ops=ops).states


@pytest.mark.parametrize("method", ["DQM", "DLM", "DADMM"])
def test_audit_quadratic_all_pass(method):
    pr = quadratic_problem(build_random_graph(6, 0.8, 2), 2, seed=3)
    ops = incidence_operators(pr.network)
    cert = optimal_certificate(pr, ops)
    rho = 1.0 if method == "DLM" else None
    p0 = RateParameters.for_problem(pr, ops, 1.0)
    c = 1.5 * p0.c_threshold("DLM" if method == "DLM" else "DQM", rho)
    params = replace(p0, c=c)
    states = run_states(pr, ops, method, c, rho)
    full = run_full_form(method, pr, SolverConfig(method, c, rho=rho, max_iter=150), ops=ops)
    rep = audit(states, pr, ops, cert, params, method, rho, full_states=full)
    assert rep.ok, rep.failed()
    expected_skips = {"error_bound"} if method == "DADMM" else set()
    assert {k for k, v in rep.checks.items() if v.status == "skipped"} == expected_skips
    assert rep.checks["contraction"].n_checked == 150


def test_audit_regularized_logistic_passes(reg_setup):
    pr, ops, cert = reg_setup
    p0 = RateParameters.for_problem(pr, ops, 1.0)
    c = 1.2 * p0.c_threshold("DQM")
    states = run_states(pr, ops, "DQM", c, iters=100)
    rep = audit(states, pr, ops, cert, replace(p0, c=c), "DQM")
    assert rep.ok, rep.failed()
    assert rep.checks["contraction"].status == "pass"
    assert rep.info["quadratic_branch_from"] is not None


def test_audit_unregularized_skips_rate_checks():
    pr = logistic(10, 3, seed=0)
    ops = incidence_operators(pr.network)
    cert = optimal_certificate(pr, ops)
    params = RateParameters.for_problem(pr, ops, 0.7)
    rep = audit(run_states(pr, ops, "DQM", 0.7), pr, ops, cert, params, "DQM")
    assert rep.checks["contraction"].status == "skipped"
    assert "assumption violated" in rep.checks["contraction"].reason
    for name in ("lemma3_relation1", "lemma3_relation2", "lemma3_relation3", "error_bound",
                 "column_space"):
        assert rep.checks[name].status == "pass"
    assert rep.ok


def test_audit_flags_corrupted_phi(reg_setup):
    pr, ops, cert = reg_setup
    params = RateParameters.for_problem(pr, ops, 0.7)
    states = run_states(pr, ops, "DQM", 0.7, iters=20)
    bad = states[7].phi.copy()
    bad[2, 0] += 0.5
    states[7] = ReducedState(states[7].x, bad, 7)
    rep = audit(states, pr, ops, cert, params, "DQM")
    col = rep.checks["column_space"]
    assert col.status == "fail" and col.first_failure == 7 and col.n_failed == 1
    assert not rep.ok
    doc = json.loads(rep.to_json())
    assert doc["ok"] is False
    assert doc["checks"]["column_space"]["first_failure"] == 7
    assert doc["checks"]["column_space"]["worst_margin"] < 0


def test_audit_bipartite_graph_skips():
    from dqm.graph import cycle_graph

    pr = quadratic_problem(cycle_graph(4), 1, seed=0)
    ops = incidence_operators(pr.network)
    cert = optimal_certificate(pr, ops)
    params = RateParameters.for_problem(pr, ops, 5.0)
    rep = audit(run_states(pr, ops, "DQM", 5.0, iters=20), pr, ops, cert, params, "DQM")
    assert rep.checks["corollary1"].status == "skipped"
    assert rep.checks["contraction"].status == "skipped"
    assert rep.ok


def test_trace_hook_columns(reg_setup):
    pr, ops, cert = reg_setup
    p0 = RateParameters.for_problem(pr, ops, 1.0)
    c = 1.2 * p0.c_threshold("DQM")
    params = replace(p0, c=c)
    tr = run("DQM", pr, SolverConfig("DQM", c, max_iter=10), ops=ops,
             hooks=[trace_hook(pr, ops, cert, "DQM", c, params=params)])
    assert tr.rows[0]["rel_err"] == 1.0
    assert tr.rows[0]["err_bound_lhs"] is None and tr.rows[0]["delta_k"] is None
    for r in tr.rows[1:]:
        assert r["err_bound_lhs"] <= r["err_bound_rhs"]
        assert r["delta_k"] > 0
    V = tr.column("V")
    assert np.all(np.diff(V) <= 0)
    assert math.isclose(V[0], energy(np.zeros(ops.m * ops.p), np.zeros(ops.m * ops.p), cert, c))
