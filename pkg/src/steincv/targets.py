"""Target distributions exposing an unnormalized log-density and its score.

Every target implements the `ScoredTarget` contract: `dim`, `log_density`
and `score` (single point), plus vectorized `log_density_batch` /
`score_batch` over (n, D) arrays.  Log-densities are defined only up to an
additive constant; scores never depend on that constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, runtime_checkable

import numpy as np
from scipy.special import logsumexp


class OutOfSupportError(ValueError):
    """A point lies outside the support of the target."""


@runtime_checkable
class ScoredTarget(Protocol):
    dim: int

    def log_density(self, theta: np.ndarray) -> float: ...

    def score(self, theta: np.ndarray) -> np.ndarray: ...


def _check_dim(theta: np.ndarray, dim: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] != dim:
        raise ValueError(f"expected dimension {dim}, got {theta.shape[-1]}")
    return theta


@dataclass(frozen=True)
class Gaussian:
    """Isotropic Gaussian N(mean, variance * I)."""

    dim: int
    mean: float = 0.0
    variance: float = 1.0

    def log_density_batch(self, thetas):
        thetas = _check_dim(np.atleast_2d(thetas), self.dim)
        sq = ((thetas - self.mean) ** 2).sum(axis=1)
        return -0.5 * sq / self.variance - 0.5 * self.dim * np.log(
            2.0 * np.pi * self.variance)

    def score_batch(self, thetas):
        thetas = _check_dim(np.atleast_2d(thetas), self.dim)
        return -(thetas - self.mean) / self.variance

    def log_density(self, theta) -> float:
        return float(self.log_density_batch(theta)[0])

    def score(self, theta):
        return self.score_batch(theta)[0]

    def in_support_batch(self, thetas):
        return np.ones(np.atleast_2d(thetas).shape[0], dtype=bool)

    def sample(self, n: int, seed: int):
        rng = np.random.Generator(np.random.PCG64(seed))
        return self.mean + np.sqrt(self.variance) * rng.standard_normal((n, self.dim))


def standard_normal(dim: int) -> Gaussian:
    return Gaussian(dim=dim)


class GaussianMixture:
    """Mixture of isotropic Gaussians with a shared variance.

    `means` is (K, D); log-density uses log-sum-exp so that high-dimensional
    evaluations do not underflow.
    """

    def __init__(self, means, variance: float = 1.0, weights=None):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        k = self.means.shape[0]
        self.variance = float(variance)
        if self.variance <= 0:
            raise ValueError("variance must be positive")
        if weights is None:
            weights = np.full(k, 1.0 / k)
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.shape != (k,) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a simplex vector, one per mean")
        self.dim = self.means.shape[1]

    def _component_logliks(self, thetas):
        # (n, K): log w_k + log N(theta | m_k, var I)
        diff = thetas[:, None, :] - self.means[None, :, :]
        sq = (diff ** 2).sum(axis=2)
        return (np.log(self.weights)[None, :] - 0.5 * sq / self.variance
                - 0.5 * self.dim * np.log(2.0 * np.pi * self.variance))

    def log_density_batch(self, thetas):
        thetas = _check_dim(np.atleast_2d(thetas), self.dim)
        return logsumexp(self._component_logliks(thetas), axis=1)

    def score_batch(self, thetas):
        thetas = _check_dim(np.atleast_2d(thetas), self.dim)
        ll = self._component_logliks(thetas)
        resp = np.exp(ll - logsumexp(ll, axis=1, keepdims=True))
        return (resp @ self.means - thetas) / self.variance

    def log_density(self, theta) -> float:
        return float(self.log_density_batch(theta)[0])

    def score(self, theta):
        return self.score_batch(theta)[0]

    def in_support_batch(self, thetas):
        return np.ones(np.atleast_2d(thetas).shape[0], dtype=bool)


def symmetric_mixture(dim: int) -> GaussianMixture:
    """The 0.5 N(-1, I) + 0.5 N(+1, I) mixture with all-(-1)/all-(+1) means."""
    return GaussianMixture(np.vstack([-np.ones(dim), np.ones(dim)]))


@dataclass(frozen=True)
class GammaPrior:
    """Independent Gamma(shape, rate) prior per coordinate, support theta > 0."""

    dim: int
    shape: float = 2.0
    rate: float = 1.0

    def in_support_batch(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, float))
        return np.all(thetas > 0.0, axis=1)

    def log_density_batch(self, thetas):
        thetas = _check_dim(np.atleast_2d(thetas), self.dim)
        out = np.full(thetas.shape[0], -np.inf)
        ok = self.in_support_batch(thetas)
        t = thetas[ok]
        out[ok] = ((self.shape - 1.0) * np.log(t) - self.rate * t).sum(axis=1)
        return out

    def score_batch(self, thetas):
        thetas = _check_dim(np.atleast_2d(thetas), self.dim)
        if not self.in_support_batch(thetas).all():
            raise OutOfSupportError("score requires theta > 0 elementwise")
        return (self.shape - 1.0) / thetas - self.rate

    def log_density(self, theta) -> float:
        theta = np.asarray(theta, float)
        if not np.all(theta > 0.0):
            raise OutOfSupportError("theta outside the positive orthant")
        return float(self.log_density_batch(theta)[0])

    def score(self, theta):
        return self.score_batch(theta)[0]

    def sample(self, n: int, seed: int):
        rng = np.random.Generator(np.random.PCG64(seed))
        return rng.gamma(self.shape, 1.0 / self.rate, size=(n, self.dim))


class Likelihood(Protocol):
    """Log-likelihood with gradient, evaluable on batches of parameters."""

    def value_batch(self, thetas: np.ndarray) -> np.ndarray: ...

    def value_and_grad_batch(self, thetas: np.ndarray): ...


class PowerPosterior:
    """p(theta | y, t) proportional to p(y|theta)^t p(theta) for t in [0, 1]."""

    def __init__(self, prior, likelihood: Likelihood, t: float):
        if not 0.0 <= t <= 1.0:
            raise ValueError("inverse temperature t must lie in [0, 1]")
        self.prior = prior
        self.likelihood = likelihood
        self.t = float(t)
        self.dim = prior.dim

    def in_support_batch(self, thetas):
        return self.prior.in_support_batch(thetas)

    def log_density_batch(self, thetas):
        thetas = _check_dim(np.atleast_2d(thetas), self.dim)
        lp = self.prior.log_density_batch(thetas)
        out = np.array(lp, copy=True)
        ok = np.isfinite(lp)
        if self.t > 0.0 and ok.any():
            out[ok] = lp[ok] + self.t * self.likelihood.value_batch(thetas[ok])
        return out

    def score_batch(self, thetas):
        thetas = _check_dim(np.atleast_2d(thetas), self.dim)
        score = self.prior.score_batch(thetas)
        if self.t > 0.0:
            _, grad = self.likelihood.value_and_grad_batch(thetas)
            score = score + self.t * grad
        return score

    def log_density(self, theta) -> float:
        val = float(self.log_density_batch(theta)[0])
        if not np.isfinite(val) and not self.in_support_batch(theta)[0]:
            raise OutOfSupportError("theta outside prior support")
        return val

    def score(self, theta):
        return self.score_batch(theta)[0]


class CallableLikelihood:
    """Adapter turning plain (value_batch, grad_batch) callables into a Likelihood."""

    def __init__(self, value_batch: Callable, grad_batch: Callable):
        self._value = value_batch
        self._grad = grad_batch

    def value_batch(self, thetas):
        return np.asarray(self._value(np.atleast_2d(thetas)), float)

    def value_and_grad_batch(self, thetas):
        thetas = np.atleast_2d(thetas)
        return self.value_batch(thetas), np.asarray(self._grad(thetas), float)
