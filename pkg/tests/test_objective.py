import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dqm.graph import complete_graph, path_graph
from dqm.objective import (
    LOGISTIC_HESS_LIPSCHITZ,
    ConsensusProblem,
    LogisticLocal,
    QuadraticLocal,
    aggregate_eval,
    curvature_estimates,
    softplus,
)

from conftest import logistic


def fd_gradient(f, x, h=1e-6):
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def random_logistic(seed, q=6, p=3, reg=0.0):
    rng = np.random.default_rng(seed)
    return LogisticLocal(rng.standard_normal((q, p)), rng.choice([-1.0, 1.0], q), reg)


def test_quadratic_at_minimizers():
    b = np.arange(6.0).reshape(3, 2)
    pr = ConsensusProblem(complete_graph(3), [QuadraticLocal(bi) for bi in b])
    val, grad, hess = aggregate_eval(pr, b)
    assert val == 0.0
    assert np.all(grad == 0)
    np.testing.assert_array_equal(hess, np.stack([np.eye(2)] * 3))


def test_single_sample_logistic():
    f = LogisticLocal([[1.0, 0.0, 0.0]], [1.0])
    assert f.value(np.zeros(3)) == pytest.approx(math.log(2), rel=1e-15)
    np.testing.assert_allclose(f.gradient(np.zeros(3)), [-0.5, 0, 0], rtol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_derivatives_match_finite_differences(seed):
    f = random_logistic(seed, reg=0.1 * seed)
    x = np.random.default_rng(100 + seed).standard_normal(3)
    np.testing.assert_allclose(f.gradient(x), fd_gradient(f.value, x), rtol=1e-6, atol=1e-9)
    H_fd = np.column_stack([fd_gradient(lambda y: f.gradient(y)[k], x) for k in range(3)]).T
    np.testing.assert_allclose(f.hessian(x), H_fd, rtol=1e-5, atol=1e-8)
    H = f.hessian(x)
    assert np.max(np.abs(H - H.T)) <= 1e-12


def test_aggregate_gradient_matches_finite_differences():
    pr = logistic(4, 2, seed=3)
    x = np.random.default_rng(0).standard_normal((4, 2))
    _, grad, _ = aggregate_eval(pr, x)
    fd = fd_gradient(lambda v: aggregate_eval(pr, v)[0], x.ravel())
    np.testing.assert_allclose(grad.ravel(), fd, rtol=1e-6, atol=1e-9)


def test_aggregate_dimension_mismatch():
    pr = logistic(4, 2, seed=3)
    with pytest.raises(ValueError, match="expected 8"):
        aggregate_eval(pr, np.zeros(7))


def test_problem_validation():
    with pytest.raises(ValueError, match="3 local objectives for 2 nodes"):
        ConsensusProblem(path_graph(2), [QuadraticLocal([0.0])] * 3)
    with pytest.raises(ValueError, match="dimension"):
        ConsensusProblem(path_graph(2), [QuadraticLocal([0.0]), QuadraticLocal([0.0, 1.0])])


def test_problem_adopts_block_dimension():
    pr = ConsensusProblem(path_graph(2), [QuadraticLocal([0.0, 1.0])] * 2)
    assert pr.network.p == 2 and pr.p == 2


def test_softplus_is_stable():
    t = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    out = softplus(t)
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0 and out[-1] == 800.0
    assert out[2] == pytest.approx(math.log(2))
    f = LogisticLocal([[1.0]], [1.0])
    assert np.isfinite(f.value(np.array([-1e4])))


def test_curvature_quadratic():
    pr = ConsensusProblem(complete_graph(3), [QuadraticLocal(np.ones(2))] * 3)
    assert curvature_estimates(pr) == curvature_estimates(pr)
    c = curvature_estimates(pr)
    assert (c.m, c.M, c.L) == (1.0, 1.0, 0.0)


def test_curvature_single_sample_norm_two():
    f = LogisticLocal([[2.0, 0.0]], [1.0])
    m, M, L = f.curvature()
    assert (m, M) == (0.0, 1.0)
    assert L == pytest.approx(8 / (6 * math.sqrt(3)), rel=1e-15)
    rng = np.random.default_rng(0)
    top = max(np.linalg.eigvalsh(f.hessian(x))[-1] for x in 5 * rng.standard_normal((1000, 2)))
    assert top <= M


def test_regularizer_shifts_curvature():
    base = random_logistic(1).curvature()
    reg = random_logistic(1, reg=0.1).curvature()
    assert reg[0] == 0.1
    assert reg[1] == pytest.approx(base[1] + 0.1, rel=1e-15)
    assert reg[2] == base[2]


def test_sigmoid_second_derivative_bound():
    # sup |sigma''| oracle on a dense grid
    t = np.linspace(-10, 10, 200_001)
    s = 1 / (1 + np.exp(-t))
    second = s * (1 - s) * (1 - 2 * s)
    assert np.max(np.abs(second)) == pytest.approx(LOGISTIC_HESS_LIPSCHITZ, rel=1e-8)


@pytest.fixture(scope="module")
def reg_problem():
    return logistic(6, 3, seed=11, reg=0.2)


def test_hessian_eigenvalues_within_bounds(reg_problem):
    c = curvature_estimates(reg_problem)
    rng = np.random.default_rng(1)
    for _ in range(200):
        _, _, H = aggregate_eval(reg_problem, 3 * rng.standard_normal((6, 3)))
        w = np.linalg.eigvalsh(H)
        assert w.min() >= c.m - 1e-12 and w.max() <= c.M + 1e-12


def test_hessian_lipschitz_and_gradient_bound(reg_problem):
    c = curvature_estimates(reg_problem)
    rng = np.random.default_rng(2)
    for _ in range(100):
        x, y = 2 * rng.standard_normal((2, 6, 3))
        _, gx, Hx = aggregate_eval(reg_problem, x)
        _, gy, Hy = aggregate_eval(reg_problem, y)
        dist = np.linalg.norm(x - y)
        # block-diagonal spectral norm = max over blocks
        hdiff = max(np.linalg.norm(a - b, 2) for a, b in zip(Hx, Hy))
        assert hdiff <= c.L * dist
        assert np.linalg.norm(gx - gy) <= c.M * dist


@given(
    st.integers(0, 10_000),
    st.floats(-40, 40),
    st.floats(1e-14, 5.0),
)
@settings(max_examples=200, deadline=None)
def test_taylor_remainder_against_high_precision(seed, shift, scale):
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 200
    rng = np.random.default_rng(seed)
    f = LogisticLocal(rng.standard_normal((3, 2)), rng.choice([-1.0, 1.0], 3))
    x = rng.standard_normal(2) * shift / 3
    dx = rng.standard_normal(2) * scale
    got = f.taylor_remainder(x, dx)
    ys = f.samples * f.labels[:, None]

    def sig(t):
        return 1 / (1 + mpmath.e ** (-t))

    ref = [mpmath.mpf(0)] * 2
    mag = [mpmath.mpf(0)] * 2
    for row in ys:
        r = [mpmath.mpf(float(v)) for v in row]
        t = sum(a * mpmath.mpf(float(b)) for a, b in zip(r, x))
        d = sum(a * mpmath.mpf(float(b)) for a, b in zip(r, dx))
        rem = sig(t + d) - sig(t) - sig(t) * (1 - sig(t)) * d
        for k in range(2):
            ref[k] += r[k] * rem
            mag[k] += abs(r[k] * rem)
    ref = np.array([float(v) for v in ref])
    # error relative to the summed magnitudes, so cancellation across samples is harmless
    mag = np.array([float(v) for v in mag])
    assert np.all(np.abs(got - ref) <= 1e-10 * mag)


def test_default_remainder_matches_closed_form():
    f = random_logistic(4)
    x, dx = np.array([0.3, -0.2, 0.1]), np.array([0.5, 0.4, -0.3])
    direct = f.gradient(x + dx) - f.gradient(x) - f.hessian(x) @ dx
    np.testing.assert_allclose(f.taylor_remainder(x, dx), direct, rtol=1e-10, atol=1e-15)


def test_quadratic_rejects_asymmetric():
    with pytest.raises(ValueError, match="symmetric"):
        QuadraticLocal([0.0, 0.0], [[1.0, 1.0], [0.0, 1.0]])


@pytest.mark.parametrize("labels", [[0.0], [2.0]])
def test_logistic_rejects_bad_labels(labels):
    with pytest.raises(ValueError):
        LogisticLocal([[1.0]], labels)
