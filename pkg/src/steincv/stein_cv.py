"""Control-variate core: the Stein form g = div(Phi) + Phi . score, closed-form
polynomial control variates, a kernel control-functional baseline, and the
variance-reduction-ratio report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve

from . import autodiff as ad
from .samplers import SampleBatch


class UndersizedBatchError(ValueError):
    """Too few samples to fit the requested control variate."""


# -- trial functions --------------------------------------------------------


class ConstantTrial:
    """Phi(theta) = c; the Stein form reduces to c . score (linear Q)."""

    def __init__(self, c):
        self.c = np.asarray(c, np.float64)
        self.dim = self.c.size

    def __call__(self, x):
        if isinstance(x, ad.Dual):
            zero = x.tangent * 0.0
            return ad.Dual(x.primal * 0.0 + self.c, zero)
        return x * 0.0 + self.c


class LinearTrial:
    """Phi(theta) = c + A theta (A symmetric when Phi is a gradient field)."""

    def __init__(self, a_matrix, c=None):
        self.a_matrix = np.atleast_2d(np.asarray(a_matrix, np.float64))
        self.dim = self.a_matrix.shape[0]
        self.c = np.zeros(self.dim) if c is None else np.asarray(c, np.float64)

    def __call__(self, x):
        return ad.matmul_any(x, self.a_matrix.T) + self.c


# -- Stein form -------------------------------------------------------------


def stein_g_batch(trial, thetas: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """g(theta) = div Phi(theta) + Phi(theta) . score(theta), per row."""
    thetas = np.atleast_2d(np.asarray(thetas, np.float64))
    scores = np.atleast_2d(np.asarray(scores, np.float64))
    if thetas.shape != scores.shape:
        raise ValueError("thetas and scores must share a shape")
    phi, div = ad.field_with_divergence(trial, thetas)
    return div.value + (phi.value * scores).sum(axis=1)


def stein_g(trial, score, theta) -> float:
    theta = np.asarray(theta, np.float64).reshape(1, -1)
    score = np.asarray(score, np.float64).reshape(1, -1)
    return float(stein_g_batch(trial, theta, score)[0])


def laplacian_g(q_gradient: Callable, q_laplacian: Callable, score, theta) -> float:
    """Laplacian zero-variance form: Delta Q(theta) + grad Q(theta) . score."""
    theta = np.asarray(theta, np.float64)
    score = np.asarray(score, np.float64)
    if theta.shape != score.shape:
        raise ValueError("theta and score must share a shape")
    return float(q_laplacian(theta)) + float(np.dot(q_gradient(theta), score))


# -- fitted models ----------------------------------------------------------


@dataclass
class CvModel:
    """A fitted control variate: an uncentered g-tilde plus an offset mu.

    `g_tilde` has zero population mean under the target (Stein identity or
    moment construction); the corrected estimate of E[f] on a batch is
    mean(f + g_tilde - mu) + mu = mean(f + g_tilde).
    """

    kind: str                # linear | quadratic | control_functional | neural
    mu: float
    _g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    payload: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def g_tilde(self, thetas, scores) -> np.ndarray:
        out = np.asarray(self._g(np.atleast_2d(thetas), np.atleast_2d(scores)),
                         np.float64)
        return out.reshape(-1)

    def g(self, thetas, scores) -> np.ndarray:
        return self.g_tilde(thetas, scores) - self.mu


def _centered_cov(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    return ac.T @ bc / (a.shape[0] - 1)


def fit_linear_cv(batch: SampleBatch) -> CvModel:
    """Closed-form linear control variate a . score minimizing empirical variance.

    Moments are empirical centered covariances; a singular score covariance
    gets a ridge jitter of 1e-8 * trace / D and is flagged.
    """
    if batch.f_values is None:
        raise ValueError("batch.f_values must be filled before fitting")
    n, d = batch.thetas.shape
    if n <= d:
        raise UndersizedBatchError(f"need n > D = {d}, got n = {n}")
    s, f = batch.scores, batch.f_values
    cov_ss = _centered_cov(s, s)
    cov_sf = _centered_cov(s, f[:, None])[:, 0]
    flags = []
    try:
        a = -cho_solve(cho_factor(cov_ss), cov_sf)
    except np.linalg.LinAlgError:
        jitter = 1e-8 * np.trace(cov_ss) / d
        a = -solve(cov_ss + jitter * np.eye(d), cov_sf, assume_a="sym")
        flags.append("singular-score-covariance-ridge")
    mu = float(f.mean() + (s @ a).mean())
    return CvModel("linear", mu, lambda th, sc: sc @ a,
                   payload={"coefficients": a}, flags=flags)


def quadratic_features(thetas: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Stein features spanning quadratic trial polynomials with symmetric B.

    Columns: {s_i}, {1 + theta_i s_i}, {theta_j s_i + theta_i s_j, i < j}.
    """
    thetas = np.atleast_2d(thetas)
    scores = np.atleast_2d(scores)
    d = thetas.shape[1]
    cols = [scores, 1.0 + thetas * scores]
    off = [thetas[:, [j]] * scores[:, [i]] + thetas[:, [i]] * scores[:, [j]]
           for i in range(d) for j in range(i + 1, d)]
    if off:
        cols.append(np.hstack(off))
    return np.hstack(cols)


def fit_quadratic_cv(batch: SampleBatch) -> CvModel:
    if batch.f_values is None:
        raise ValueError("batch.f_values must be filled before fitting")
    n, d = batch.thetas.shape
    n_params = d * (d + 3) // 2
    if n <= n_params:
        raise UndersizedBatchError(
            f"need n > D(D+3)/2 = {n_params}, got n = {n}")
    psi = quadratic_features(batch.thetas, batch.scores)
    f = batch.f_values
    cov_pp = _centered_cov(psi, psi)
    cov_pf = _centered_cov(psi, f[:, None])[:, 0]
    flags = []
    try:
        beta = -cho_solve(cho_factor(cov_pp), cov_pf)
    except np.linalg.LinAlgError:
        jitter = 1e-8 * np.trace(cov_pp) / cov_pp.shape[0]
        beta = -solve(cov_pp + jitter * np.eye(cov_pp.shape[0]), cov_pf,
                      assume_a="sym")
        flags.append("singular-feature-covariance-ridge")
    mu = float(f.mean() + (psi @ beta).mean())
    return CvModel("quadratic", mu,
                   lambda th, sc: quadratic_features(th, sc) @ beta,
                   payload={"coefficients": beta}, flags=flags)


# -- control functional baseline --------------------------------------------


def stein_kernel(x1, s1, x2, s2, lengthscale: float) -> np.ndarray:
    """Stein kernel built on the squared-exponential base kernel.

    k0(x, y) = k [ D/l^2 - r^2/l^4 + (x - y).(s(x) - s(y))/l^2 + s(x).s(y) ].
    Symmetric by construction; each k0(., y) has zero mean under the target.
    """
    x1, s1 = np.atleast_2d(x1), np.atleast_2d(s1)
    x2, s2 = np.atleast_2d(x2), np.atleast_2d(s2)
    d = x1.shape[1]
    l2 = lengthscale ** 2
    # everything via (n, m) matmuls; an (n, m, D) intermediate would not fit
    # in memory for the larger fits
    r2 = ((x1 ** 2).sum(1)[:, None] + (x2 ** 2).sum(1)[None, :]
          - 2.0 * x1 @ x2.T)
    base = np.exp(-0.5 * r2 / l2)
    cross = ((x1 * s1).sum(1)[:, None] - x1 @ s2.T - s1 @ x2.T
             + (x2 * s2).sum(1)[None, :])
    return base * (d / l2 - r2 / l2 ** 2 + cross / l2 + s1 @ s2.T)


def median_heuristic(thetas: np.ndarray) -> float:
    sq = (thetas ** 2).sum(1)
    r2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * thetas @ thetas.T, 0.0)
    dists = np.sqrt(r2[np.triu_indices(len(thetas), k=1)])
    med = float(np.median(dists))
    return med if med > 0 else 1.0


def fit_control_functional(batch: SampleBatch, bandwidth="median",
                           ridge: float = 1e-3) -> CvModel:
    """Kernel control functional fitted on the first half of the batch.

    Solves (K0 + ridge I) alpha = f - beta with beta the fitted constant;
    ill-conditioned systems escalate the ridge by decades up to 1e-2.
    """
    if batch.f_values is None:
        raise ValueError("batch.f_values must be filled before fitting")
    if batch.n < 4:
        raise UndersizedBatchError("control functional needs n >= 4")
    fit_half, _ = batch.split(0.5)
    x, s, f = fit_half.thetas, fit_half.scores, fit_half.f_values
    ls = median_heuristic(x) if bandwidth == "median" else float(bandwidth)

    flags = []
    if np.var(f) == 0.0:
        return CvModel("control_functional", float(f[0]),
                       lambda th, sc: np.zeros(np.atleast_2d(th).shape[0]),
                       payload={"lengthscale": ls}, flags=["zero-variance-f"])

    k0 = stein_kernel(x, s, x, s, ls)
    n = len(x)
    lam = max(ridge, 1e-12)
    factor = None
    while lam <= 1e-2:
        try:
            factor = cho_factor(k0 + lam * np.eye(n))
            break
        except np.linalg.LinAlgError:
            lam *= 10.0
    if factor is not None:
        kinv_f = cho_solve(factor, f)
        kinv_1 = cho_solve(factor, np.ones(n))
    else:
        flags.append("ill-conditioned-kernel")
        lam = 1e-2
        kinv_f = solve(k0 + lam * np.eye(n), f, assume_a="sym")
        kinv_1 = solve(k0 + lam * np.eye(n), np.ones(n), assume_a="sym")
    beta = float(kinv_1 @ f / kinv_1.sum())
    alpha = kinv_f - beta * kinv_1

    def g_fn(th, sc):
        return -stein_kernel(th, sc, x, s, ls) @ alpha

    return CvModel("control_functional", beta, g_fn,
                   payload={"lengthscale": ls, "alpha": alpha, "ridge": lam},
                   flags=flags)


# -- evaluation -------------------------------------------------------------


@dataclass
class VarianceReport:
    ratio_train: float
    ratio_test: float
    corrected_mean: float
    raw_mean: float
    n_train: int
    n_test: int
    se_raw: float
    se_corrected: float
    flags: list = field(default_factory=list)


def _ratio_on(model: CvModel, batch: SampleBatch):
    f = batch.f_values
    g = model.g_tilde(batch.thetas, batch.scores)
    var_f = f.var(ddof=1) if batch.n > 1 else 0.0
    var_fg = (f + g).var(ddof=1) if batch.n > 1 else 0.0
    if var_f == 0.0:
        return math.nan, g, ["zero-variance-f"]
    return var_fg / var_f, g, []


def variance_reduction_ratio(model: CvModel, batch: SampleBatch,
                             train_batch: Optional[SampleBatch] = None) -> VarianceReport:
    """Var[f + g]/Var[f] on `batch` (and optionally on the training batch)."""
    if batch.f_values is None:
        raise ValueError("batch.f_values must be filled")
    ratio_test, g, flags = _ratio_on(model, batch)
    f = batch.f_values
    corrected = f + g
    ratio_train = math.nan
    if train_batch is not None:
        ratio_train, _, fl = _ratio_on(model, train_batch)
        flags += fl
    return VarianceReport(
        ratio_train=ratio_train,
        ratio_test=ratio_test,
        corrected_mean=float(corrected.mean()),
        raw_mean=float(f.mean()),
        n_train=0 if train_batch is None else train_batch.n,
        n_test=batch.n,
        se_raw=float(f.std(ddof=1) / math.sqrt(batch.n)) if batch.n > 1 else 0.0,
        se_corrected=float(corrected.std(ddof=1) / math.sqrt(batch.n)) if batch.n > 1 else 0.0,
        flags=flags + model.flags,
    )
