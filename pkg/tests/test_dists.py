import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from mlcwmd.dists import (H_MAX, FactorizationError, IsingCapacityError, IsingModel, categorical_block_logpmf,
                          cholesky_ridged, enumerate_states, ising_conditional, ising_convert_domain,
                          ising_fit_pseudo, ising_log_normalizer, ising_logpmf, ising_pseudo_grad,
                          ising_pseudo_loglik, ising_sample, multinomial_logpmf, mvn_logpdf)


def random_ising(rng, h, domain="01", scale=1.0):
    nu = rng.normal(0, scale, h)
    g = np.triu(rng.normal(0, scale, (h, h)), 1)
    return IsingModel(nu, g + g.T, domain)


def brute_energy(d, m):
    e = float(m.nu @ d)
    for l, k in itertools.combinations(range(m.h), 2):
        e += m.gamma[l, k] * d[l] * d[k]
    return e


# --- multivariate normal -----------------------------------------------------

def test_mvn_matches_scipy():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    S = A @ A.T + np.eye(3)
    mu = rng.normal(size=3)
    X = rng.normal(size=(20, 3))
    np.testing.assert_allclose(mvn_logpdf(X, mu, S), stats.multivariate_normal(mu, S).logpdf(X), atol=1e-10)


def test_mvn_identity_origin_value():
    # log density of N(0, I_2) at the origin is -log(2 pi)
    assert mvn_logpdf(np.zeros((1, 2)), np.zeros(2), np.eye(2))[0] == pytest.approx(-np.log(2 * np.pi))


def test_mvn_empty_block_is_zero():
    assert mvn_logpdf(np.zeros((4, 0)), np.zeros(0), np.zeros((0, 0))).tolist() == [0.0] * 4


def test_cholesky_ridge_and_failure():
    S = np.array([[1.0, 1.0], [1.0, 1.0]])  # singular
    L = cholesky_ridged(S)
    assert np.all(np.isfinite(L))
    with pytest.raises(FactorizationError, match="cluster 2"):
        cholesky_ridged(-np.eye(2), label="cluster 2")


# --- multinomial ---------------------------------------------------------------

def test_multinomial_values():
    lam = np.array([0.2, 0.3, 0.5])
    np.testing.assert_allclose(multinomial_logpmf(np.array([1, 3, 2]), lam), np.log([0.2, 0.5, 0.3]))
    V = np.array([[1, 2], [2, 1]])
    out = categorical_block_logpmf(V, (np.array([0.4, 0.6]), np.array([0.1, 0.9])))
    np.testing.assert_allclose(out, [np.log(0.4 * 0.9), np.log(0.6 * 0.1)])


# --- Ising -----------------------------------------------------------------------

def test_states_order_and_shape():
    S = enumerate_states(3)
    assert S.shape == (8, 3)
    assert S[0].tolist() == [0, 0, 0] and S[-1].tolist() == [1, 1, 1]
    assert set(np.unique(enumerate_states(2, "pm1"))) == {-1.0, 1.0}
    assert enumerate_states(0).shape == (1, 0)


@pytest.mark.parametrize("domain", ["01", "pm1"])
def test_normalizer_matches_brute_force(domain):
    rng = np.random.default_rng(1)
    m = random_ising(rng, 4, domain)
    S = enumerate_states(4, domain)
    brute = np.log(sum(np.exp(brute_energy(s, m)) for s in S))
    assert ising_log_normalizer(m) == pytest.approx(brute, abs=1e-12)
    assert np.exp(ising_logpmf(S, m)).sum() == pytest.approx(1.0, abs=1e-12)


def test_independent_model_is_product_of_bernoullis():
    nu = np.array([0.3, -1.2, 2.0])
    m = IsingModel(nu, np.zeros((3, 3)))
    d = np.array([1.0, 0.0, 1.0])
    p = 1 / (1 + np.exp(-nu))
    assert np.exp(ising_logpmf(d, m)) == pytest.approx(p[0] * (1 - p[1]) * p[2], rel=1e-12)


@pytest.mark.parametrize("domain", ["01", "pm1"])
def test_conditional_matches_enumeration(domain):
    rng = np.random.default_rng(2)
    m = random_ising(rng, 4, domain)
    S, P = m.state_probabilities()
    for s in S[::3]:
        for l in range(4):
            same = np.all(np.delete(S, l, axis=1) == np.delete(s, l), axis=1)
            want = P[same & (S[:, l] == s[l])].sum() / P[same].sum()
            assert ising_conditional(s, l, m) == pytest.approx(want, abs=1e-12)


def test_conversion_preserves_distribution_and_is_involution():
    rng = np.random.default_rng(3)
    m = random_ising(rng, 3)
    pm = ising_convert_domain(m, "pm1")
    _, p01 = m.state_probabilities()
    _, ppm = pm.state_probabilities()
    np.testing.assert_allclose(p01, ppm, atol=1e-12)  # same state order under s = 2d - 1
    back = ising_convert_domain(pm, "01")
    np.testing.assert_allclose(back.nu, m.nu, atol=1e-12)
    np.testing.assert_allclose(back.gamma, m.gamma, atol=1e-12)
    with pytest.raises(ValueError):
        ising_convert_domain(m, "01")


def test_capacity_guard():
    m = IsingModel.independent(H_MAX + 1)
    with pytest.raises(IsingCapacityError):
        ising_log_normalizer(m)
    # pseudo-likelihood still works beyond the exact limit
    D = np.random.default_rng(0).integers(0, 2, size=(5, H_MAX + 1)).astype(float)
    assert np.isfinite(ising_pseudo_loglik(D, 1.0, m))


def test_model_validation():
    with pytest.raises(ValueError, match="symmetric"):
        IsingModel(np.zeros(2), np.array([[0, 1.0], [0, 0]]))
    with pytest.raises(ValueError, match="diagonal"):
        IsingModel(np.zeros(2), np.eye(2))
    with pytest.raises(ValueError, match="domain"):
        ising_logpmf(np.array([2.0, 0.0]), IsingModel.independent(2))


@pytest.mark.parametrize("domain", ["01", "pm1"])
def test_pseudo_gradient_matches_finite_differences(domain):
    rng = np.random.default_rng(4)
    m = random_ising(rng, 4, domain)
    D = enumerate_states(4, domain)[rng.integers(0, 16, 40)]
    w = rng.random(40)
    g = ising_pseudo_grad(D, w, m)
    iu = np.triu_indices(4, 1)
    theta = np.concatenate([m.nu, m.gamma[iu]])

    def f(t):
        gam = np.zeros((4, 4))
        gam[iu] = t[4:]
        return ising_pseudo_loglik(D, w, IsingModel(t[:4], gam + gam.T, domain))

    eps = 1e-6
    fd = np.array([(f(theta + eps * e) - f(theta - eps * e)) / (2 * eps) for e in np.eye(theta.size)])
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_pseudo_fit_recovers_parameters():
    m = IsingModel.from_pairs([0.4, -0.3, 0.2], {(0, 1): 1.0, (1, 2): -0.8})
    D = ising_sample(m, 20000, np.random.default_rng(5))
    fit = ising_fit_pseudo(D)
    np.testing.assert_allclose(fit.nu, m.nu, atol=0.1)
    np.testing.assert_allclose(fit.gamma, m.gamma, atol=0.12)


def test_pseudo_fit_is_stationary():
    D = ising_sample(IsingModel.from_pairs([0.2, 0.1, -0.5], {(0, 2): 0.7}), 500, np.random.default_rng(6))
    fit = ising_fit_pseudo(D)
    assert np.abs(ising_pseudo_grad(D, 1.0, fit)).max() / 500 < 1e-5


def test_pseudo_fit_freezes_constant_column():
    rng = np.random.default_rng(7)
    D = rng.integers(0, 2, size=(50, 3)).astype(float)
    D[:, 1] = 1.0
    with pytest.warns(RuntimeWarning, match="frozen"):
        fit = ising_fit_pseudo(D)
    assert fit.frozen_vars == (1,)
    assert fit.gamma[1].tolist() == [0.0, 0.0, 0.0]
    assert fit.nu[1] == 10.0


def test_sampler_frequencies():
    m = IsingModel.from_pairs([0.5, -0.5], {(0, 1): 1.5})
    D = ising_sample(m, 40000, np.random.default_rng(8))
    S, P = m.state_probabilities()
    freq = np.array([np.mean(np.all(D == s, axis=1)) for s in S])
    np.testing.assert_allclose(freq, P, atol=0.01)


def test_serialization_round_trip():
    m = IsingModel.from_pairs([0.1, 0.2, 0.3], {(0, 1): -1.0}, domain="pm1")
    back = IsingModel.from_dict(m.to_dict())
    np.testing.assert_array_equal(back.gamma, m.gamma)
    assert back.domain == "pm1" and back.log_S == pytest.approx(m.log_S)


@given(st.integers(1, 5), st.integers(0, 2 ** 31 - 1), st.sampled_from(["01", "pm1"]))
def test_probabilities_sum_to_one(h, seed, domain):
    m = random_ising(np.random.default_rng(seed), h, domain, scale=2.0)
    _, P = m.state_probabilities()
    assert P.sum() == pytest.approx(1.0, abs=1e-10)
    assert np.all(P > 0)


@given(st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_conversion_round_trip_property(h, seed):
    m = random_ising(np.random.default_rng(seed), h, scale=3.0)
    back = ising_convert_domain(ising_convert_domain(m, "pm1"), "01")
    np.testing.assert_allclose(back.nu, m.nu, atol=1e-10)
    np.testing.assert_allclose(back.gamma, m.gamma, atol=1e-10)
