import numpy as np
import pytest
from scipy import optimize
from scipy.special import expit

from mlcwmd.glmm import (LogisticMixedFit, conditional_loglik, fit_logistic_glm, fit_logistic_mixed,
                         laplace_loglik, linear_predictor)

from oracles import quadrature_loglik


def simulate(rng, J=20, n=40, beta=(-0.5, 1.0), sigma=1.0, return_b=False):
    groups = np.repeat(np.arange(J), n)
    x = rng.normal(size=J * n)
    F = np.column_stack([np.ones_like(x), x])
    b = rng.normal(0, sigma, J)
    y = (rng.random(J * n) < expit(F @ np.asarray(beta) + b[groups])).astype(float)
    return (F, groups, y, b) if return_b else (F, groups, y)


def test_glm_matches_generic_optimizer():
    rng = np.random.default_rng(0)
    F, _, y = simulate(rng, sigma=0.0)
    fit = fit_logistic_glm(F, y)
    nll = lambda b: -(y * (F @ b) - np.logaddexp(0, F @ b)).sum()  # noqa: E731
    ref = optimize.minimize(nll, np.zeros(2), method="BFGS", options={"gtol": 1e-10}).x
    np.testing.assert_allclose(fit.beta, ref, atol=1e-6)
    assert fit.converged and not fit.separated


def test_glm_separation_is_clamped():
    x = np.array([-2.0, -1.0, 1.0, 2.0])
    with pytest.warns(RuntimeWarning, match="separation"):
        fit = fit_logistic_glm(np.column_stack([np.ones(4), x]), np.array([0, 0, 1, 1.0]))
    assert fit.separated and np.abs(fit.beta).max() <= 15.0


def test_single_class_rejected():
    with pytest.raises(ValueError, match="single response class"):
        fit_logistic_glm(np.ones((3, 1)), np.ones(3))


@pytest.mark.parametrize("seed", range(3))
def test_laplace_close_to_quadrature(seed):
    # the Laplace error is of order 1/n_j per group and adds up over groups
    rng = np.random.default_rng(seed)
    F, g, y = simulate(rng, J=8, n=30)
    beta, sigma = np.array([-0.3, 0.8]), 1.2
    exact = quadrature_loglik(F, g, y, beta, sigma)
    assert laplace_loglik(F, g, y, beta, sigma) == pytest.approx(exact, abs=0.01 * 8)


def test_quadrature_oracle_converged():
    rng = np.random.default_rng(3)
    F, g, y = simulate(rng, J=3, n=20)
    beta = np.array([0.2, -0.4])
    assert quadrature_loglik(F, g, y, beta, 0.9, nodes=32) == pytest.approx(
        quadrature_loglik(F, g, y, beta, 0.9, nodes=64), abs=1e-10)


def test_laplace_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    F, g, y = simulate(rng, J=6, n=25)
    fit = fit_logistic_mixed(F, g, y)
    theta = np.r_[fit.beta, np.log(fit.sigma_b)]
    f = lambda t: laplace_loglik(F, g, y, t[:-1], np.exp(t[-1]))  # noqa: E731
    eps = 1e-5
    fd = np.array([(f(theta + eps * e) - f(theta - eps * e)) / (2 * eps) for e in np.eye(3)])
    # the optimum is stationary in every direction
    assert np.abs(fd).max() < 1e-3


def test_mixed_recovers_truth():
    rng = np.random.default_rng(5)
    F, g, y, b = simulate(rng, J=40, n=60, beta=(-0.5, 1.0), sigma=1.0, return_b=True)
    fit = fit_logistic_mixed(F, g, y)
    assert fit.converged
    # the intercept absorbs the realised mean of the drawn group effects
    target = np.array([-0.5 + b.mean(), 1.0])
    assert np.all(np.abs(fit.beta - target) < 3 * fit.se)
    assert 0.6 < fit.sigma_b < 1.5
    assert fit.loglik == pytest.approx(laplace_loglik(F, g, y, fit.beta, fit.sigma_b), abs=1e-8)


def test_modes_satisfy_first_order_condition():
    rng = np.random.default_rng(6)
    F, g, y = simulate(rng, J=5, n=30)
    fit = fit_logistic_mixed(F, g, y)
    eta = F @ fit.beta
    for j in range(5):
        r = y[g == j] - expit(eta[g == j] + fit.b[j])
        assert r.sum() - fit.b[j] / fit.sigma_b ** 2 == pytest.approx(0.0, abs=1e-8)


def test_sigma_zero_equals_glm():
    rng = np.random.default_rng(7)
    F, g, y = simulate(rng, sigma=0.0)
    mixed = fit_logistic_mixed(F, g, y, sigma_fixed=0.0)
    glm = fit_logistic_glm(F, y)
    np.testing.assert_allclose(mixed.beta, glm.beta, atol=1e-5)
    assert mixed.sigma_b == 0.0 and np.all(mixed.b == 0.0)
    assert mixed.loglik == pytest.approx(glm.loglik, abs=1e-6)


def test_integer_weights_equal_row_duplication():
    rng = np.random.default_rng(8)
    F, g, y = simulate(rng, J=6, n=20)
    w = np.where(rng.random(y.size) < 0.3, 2.0, 1.0)
    rows = np.repeat(np.arange(y.size), w.astype(int))
    a = fit_logistic_mixed(F, g, y, weights=w, gtol=1e-9)
    b = fit_logistic_mixed(F[rows], g[rows], y[rows], gtol=1e-9)
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-5)
    assert a.sigma_b == pytest.approx(b.sigma_b, abs=1e-5)


def test_zero_weights_drop_rows():
    rng = np.random.default_rng(9)
    F, g, y = simulate(rng, J=6, n=20)
    w = np.ones(y.size)
    w[:15] = 0.0
    a = fit_logistic_mixed(F, g, y, weights=w, n_groups=6, gtol=1e-9)
    b = fit_logistic_mixed(F[15:], g[15:], y[15:], n_groups=6, gtol=1e-9)
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-6)


def test_warm_start_reaches_same_optimum():
    rng = np.random.default_rng(10)
    F, g, y = simulate(rng, J=10, n=30)
    cold = fit_logistic_mixed(F, g, y)
    warm = fit_logistic_mixed(F, g, y, init=cold)
    np.testing.assert_allclose(warm.beta, cold.beta, atol=1e-4)


def test_prediction_helpers():
    rng = np.random.default_rng(11)
    F, g, y = simulate(rng, J=4, n=30)
    fit = fit_logistic_mixed(F, g, y)
    eta = linear_predictor(fit, F, np.full(y.size, 99))  # unseen group -> b = 0
    np.testing.assert_allclose(eta, F @ fit.beta)
    ll = conditional_loglik(fit, F, g, y)
    eta = F @ fit.beta + fit.b[g]
    np.testing.assert_allclose(ll, y * eta - np.logaddexp(0, eta))


def test_serialization_round_trip():
    rng = np.random.default_rng(12)
    F, g, y = simulate(rng, J=4, n=30)
    fit = fit_logistic_mixed(F, g, y)
    back = LogisticMixedFit.from_dict(fit.to_dict())
    np.testing.assert_array_equal(back.b, fit.b)
    assert back.sigma_b == fit.sigma_b


def test_analytic_gradient_away_from_optimum():
    from mlcwmd.glmm import _LaplaceObjective

    rng = np.random.default_rng(13)
    F, g, y = simulate(rng, J=6, n=25)
    obj = _LaplaceObjective(F, g, y, np.ones(y.size), 6, None)
    theta = np.array([0.4, -0.7, np.log(1.7)])
    _, grad = obj.value_and_grad(theta)
    eps = 1e-6
    fd = np.array([(obj.value_and_grad(theta + eps * e)[0] - obj.value_and_grad(theta - eps * e)[0]) / (2 * eps)
                   for e in np.eye(3)])
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-6)
