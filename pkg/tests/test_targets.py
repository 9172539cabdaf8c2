"""Log-densities against scipy oracles, scores against finite differences."""

import numpy as np
import pytest
from scipy import stats

from steincv.targets import (CallableLikelihood, Gaussian, GammaPrior,
                             GaussianMixture, OutOfSupportError,
                             PowerPosterior, standard_normal,
                             symmetric_mixture)


def _fd_score(log_density, theta, h=1e-6):
    theta = np.asarray(theta, float)
    out = np.zeros_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        out[i] = (log_density(tp) - log_density(tm)) / (2 * h)
    return out


def test_gaussian_log_density_matches_scipy():
    g = Gaussian(3, mean=np.array([1.0, -2.0, 0.5]), variance=2.5)
    rng = np.random.Generator(np.random.PCG64(0))
    thetas = rng.standard_normal((20, 3))
    ref = stats.multivariate_normal(g.mean, 2.5 * np.eye(3)).logpdf(thetas)
    np.testing.assert_allclose(g.log_density_batch(thetas), ref, rtol=1e-10)


def test_gaussian_score_matches_finite_differences():
    g = Gaussian(4, variance=0.7)
    theta = np.array([0.3, -1.1, 2.0, 0.0])
    np.testing.assert_allclose(g.score(theta), _fd_score(g.log_density, theta),
                               rtol=1e-6)


def test_standard_normal_sampling_moments():
    g = standard_normal(3)
    x = g.sample(50_000, seed=1)
    assert np.abs(x.mean(axis=0)).max() < 0.03
    assert np.abs(x.var(axis=0) - 1.0).max() < 0.03


def test_mixture_log_density_matches_direct_logsumexp():
    mix = symmetric_mixture(5)
    rng = np.random.Generator(np.random.PCG64(2))
    thetas = rng.standard_normal((30, 5)) * 2.0
    comps = np.stack([stats.multivariate_normal(m, np.eye(5)).logpdf(thetas)
                      for m in mix.means])
    ref = np.logaddexp(comps[0] + np.log(0.5), comps[1] + np.log(0.5))
    np.testing.assert_allclose(mix.log_density_batch(thetas), ref, rtol=1e-10)


def test_mixture_score_matches_finite_differences():
    mix = GaussianMixture(np.array([[0.0, 1.0], [2.0, -1.0], [-3.0, 0.5]]),
                          variance=1.5, weights=[0.2, 0.5, 0.3])
    for theta in ([0.1, 0.2], [1.9, -0.8], [-4.0, 2.0]):
        np.testing.assert_allclose(
            mix.score(np.array(theta)),
            _fd_score(mix.log_density, np.array(theta)), rtol=1e-5, atol=1e-8)


def test_symmetric_mixture_component_means():
    mix = symmetric_mixture(4)
    np.testing.assert_allclose(mix.means, [[-1.0] * 4, [1.0] * 4])
    np.testing.assert_allclose(mix.weights, [0.5, 0.5])


def test_gamma_prior_score_and_support():
    prior = GammaPrior(3, shape=2.0, rate=1.0)
    theta = np.array([0.5, 2.0, 1.3])
    np.testing.assert_allclose(prior.score(theta),
                               _fd_score(prior.log_density, theta), rtol=1e-6)
    # unnormalized density must match the Gamma(2, 1) shape up to a constant
    other = np.array([1.0, 1.0, 1.0])
    diff = prior.log_density(theta) - prior.log_density(other)
    ref = (stats.gamma(2.0).logpdf(theta).sum()
           - stats.gamma(2.0).logpdf(other).sum())
    assert abs(diff - ref) < 1e-10

    with pytest.raises(OutOfSupportError):
        prior.log_density(np.array([0.5, -1.0, 1.0]))
    with pytest.raises(OutOfSupportError):
        prior.score_batch(np.array([[0.5, -1.0, 1.0]]))
    assert prior.log_density_batch(np.array([[0.5, -1.0, 1.0]]))[0] == -np.inf


def test_gamma_prior_sampling_moments():
    prior = GammaPrior(2, shape=2.0, rate=1.0)
    x = prior.sample(100_000, seed=3)
    assert np.abs(x.mean(axis=0) - 2.0).max() < 0.03     # shape/rate
    assert np.abs(x.var(axis=0) - 2.0).max() < 0.08      # shape/rate^2


def _toy_likelihood(y):
    """Gaussian location likelihood in D=2 with unit noise."""

    def value_batch(thetas):
        sq = ((y[None, None, :] - thetas[:, None, :]) ** 2).sum(axis=(1, 2))
        return -0.5 * sq - y.size * 0.5 * np.log(2 * np.pi)

    def grad_batch(thetas):
        return (y[None, :] - thetas) * 1.0

    return CallableLikelihood(value_batch, grad_batch)


def test_power_posterior_interpolates_prior_and_posterior():
    y = np.array([1.0, -0.5])
    prior = Gaussian(2, variance=4.0)
    lik = _toy_likelihood(y)
    thetas = np.array([[0.2, 0.1], [1.5, -1.0]])

    cold = PowerPosterior(prior, lik, 0.0)
    np.testing.assert_allclose(cold.log_density_batch(thetas),
                               prior.log_density_batch(thetas))
    np.testing.assert_allclose(cold.score_batch(thetas),
                               prior.score_batch(thetas))

    warm = PowerPosterior(prior, lik, 0.7)
    expected = (prior.log_density_batch(thetas)
                + 0.7 * lik.value_batch(thetas))
    np.testing.assert_allclose(warm.log_density_batch(thetas), expected)
    for th in thetas:
        np.testing.assert_allclose(warm.score(th),
                                   _fd_score(warm.log_density, th), rtol=1e-6)


def test_power_posterior_rejects_bad_temperature():
    prior = Gaussian(1)
    lik = _toy_likelihood(np.array([0.0]))
    with pytest.raises(ValueError):
        PowerPosterior(prior, lik, 1.5)
