"""Samplers producing score-annotated batches: exact mixture draws,
random-walk Metropolis, and parallel tempering over a power-posterior family.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .targets import GaussianMixture, OutOfSupportError, PowerPosterior


@dataclass
class SampleBatch:
    """n samples with their scores; `f_values` is filled by the caller."""

    thetas: np.ndarray                       # (n, D)
    scores: np.ndarray                       # (n, D)
    f_values: Optional[np.ndarray] = None    # (n,)
    rng_seed: int = 0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, np.float64))
        self.scores = np.atleast_2d(np.asarray(self.scores, np.float64))
        if self.thetas.shape != self.scores.shape:
            raise ValueError("thetas and scores must have matching shapes")
        if self.thetas.shape[0] < 1:
            raise ValueError("a batch needs at least one sample")
        if not (np.isfinite(self.thetas).all() and np.isfinite(self.scores).all()):
            raise ValueError("non-finite rows in sample batch")

    @property
    def n(self) -> int:
        return self.thetas.shape[0]

    @property
    def dim(self) -> int:
        return self.thetas.shape[1]

    def with_f(self, f: Callable[[np.ndarray], np.ndarray]) -> "SampleBatch":
        """Return a copy with f evaluated on the whole batch."""
        vals = np.asarray(f(self.thetas), np.float64).reshape(self.n)
        return replace(self, f_values=vals)

    def split(self, fraction: float = 0.5):
        """Deterministic head/tail split (train, test)."""
        k = int(round(self.n * fraction))
        if k < 1 or k >= self.n:
            raise ValueError("split would leave an empty half")

        def take(sl):
            return replace(self, thetas=self.thetas[sl], scores=self.scores[sl],
                           f_values=None if self.f_values is None else self.f_values[sl])

        return take(slice(0, k)), take(slice(k, None))


@dataclass
class ChainConfig:
    n_iterations: int = 20_000
    burn_in: int = 10_000
    proposal_scale: float | tuple = 0.5     # scalar, or one scale per rung
    temperature_rungs: tuple = (1.0,)
    swap_interval: int = 10
    seed: int = 0
    n_samples: int = 2_000
    n_chains: int = 1                       # replicate chains run in lockstep
    subsample: str = "stride"               # "stride" | "random"

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iterations:
            raise ValueError("burn_in must satisfy 0 <= burn_in < n_iterations")
        rungs = tuple(float(t) for t in self.temperature_rungs)
        if any(b <= a for a, b in zip(rungs, rungs[1:])):
            raise ValueError("temperature rungs must be strictly increasing")
        if rungs[-1] != 1.0:
            raise ValueError("last temperature rung must be 1")
        if self.subsample not in ("stride", "random"):
            raise ValueError("subsample must be 'stride' or 'random'")
        self.temperature_rungs = rungs

    def rung_scales(self) -> np.ndarray:
        scales = np.asarray(self.proposal_scale, np.float64)
        if scales.ndim == 0:
            scales = np.full(len(self.temperature_rungs), float(scales))
        if scales.shape != (len(self.temperature_rungs),):
            raise ValueError("need one proposal scale, or one per rung")
        return scales


def power_law_rungs(m: int, exponent: float = 5.0, include_zero: bool = False):
    """The (i/m)^exponent temperature ladder, dense near t = 0."""
    i0 = 0 if include_zero else 1
    return tuple((i / m) ** exponent for i in range(i0, m + 1))


def sample_mixture_iid(mixture: GaussianMixture, n: int, seed: int) -> SampleBatch:
    """Exact ancestral sampling: component by weight, then isotropic normal."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    comps = rng.choice(mixture.means.shape[0], size=n, p=mixture.weights)
    thetas = (mixture.means[comps]
              + np.sqrt(mixture.variance) * rng.standard_normal((n, mixture.dim)))
    return SampleBatch(thetas, mixture.score_batch(thetas), rng_seed=seed)


def _log_density_batch(target, thetas: np.ndarray) -> np.ndarray:
    if hasattr(target, "log_density_batch"):
        return np.asarray(target.log_density_batch(thetas), float)
    out = np.empty(thetas.shape[0])
    for i, th in enumerate(thetas):
        try:
            out[i] = target.log_density(th)
        except OutOfSupportError:
            out[i] = -np.inf
    return out


def _thin(idx_pool: np.ndarray, n_samples: int, mode: str, rng) -> np.ndarray:
    if len(idx_pool) <= n_samples:
        return idx_pool
    if mode == "random":
        return np.sort(rng.choice(idx_pool, size=n_samples, replace=False))
    stride_idx = np.linspace(0, len(idx_pool) - 1, n_samples).round().astype(int)
    return idx_pool[stride_idx]


def metropolis(target, config: ChainConfig, init) -> SampleBatch:
    """Gaussian random-walk Metropolis; returns post-burn-in thinned states."""
    init = np.asarray(init, np.float64).reshape(-1)
    if not np.isfinite(_log_density_batch(target, init[None, :])[0]):
        raise OutOfSupportError("initial state outside target support")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    scale = float(np.atleast_1d(np.asarray(config.proposal_scale, float))[0])

    d = init.size
    state = init.copy()
    logp = _log_density_batch(target, state[None, :])[0]
    kept = np.empty((config.n_iterations - config.burn_in, d))
    accepts = 0
    consecutive_rejects = 0
    warned_stuck = False
    for it in range(config.n_iterations):
        prop = state + scale * rng.standard_normal(d)
        logp_prop = _log_density_batch(target, prop[None, :])[0]
        if np.log(rng.random()) < logp_prop - logp:
            state, logp = prop, logp_prop
            accepts += 1
            consecutive_rejects = 0
        else:
            consecutive_rejects += 1
            if consecutive_rejects >= 1000:
                warned_stuck = True
        if it >= config.burn_in:
            kept[it - config.burn_in] = state

    idx = _thin(np.arange(kept.shape[0]), config.n_samples, config.subsample, rng)
    thetas = kept[idx]
    diag = {"acceptance_rate": accepts / config.n_iterations}
    if warned_stuck:
        diag["warnings"] = ["zero acceptance over 1000 consecutive proposals"]
    return SampleBatch(thetas, target.score_batch(thetas),
                       rng_seed=config.seed, diagnostics=diag)


class PowerFamily:
    """Power-posterior family p(theta|y,t) over a shared prior and likelihood.

    Batched log-likelihood evaluations let parallel tempering integrate all
    rungs (and replicate chains) in one call, which matters when each
    likelihood evaluation is an ODE solve.
    """

    def __init__(self, prior, likelihood):
        self.prior = prior
        self.likelihood = likelihood
        self.dim = prior.dim

    def log_lik_batch(self, thetas):
        return np.asarray(self.likelihood.value_batch(np.atleast_2d(thetas)), float)

    def target_at(self, t: float) -> PowerPosterior:
        return PowerPosterior(self.prior, self.likelihood, t)


def parallel_tempering(family: PowerFamily, config: ChainConfig, init) -> dict:
    """Coupled random-walk chains across the temperature ladder.

    Adjacent rungs propose state swaps every `swap_interval` iterations,
    accepted with min(1, exp[(t_j - t_i)(L_i - L_j)]) where L is the
    log-likelihood.  `n_chains` replicate ladders run in lockstep and their
    retained states are pooled per rung.  Returns {t: SampleBatch}.
    """
    rungs = np.asarray(config.temperature_rungs)
    scales = config.rung_scales()
    r, c, d = len(rungs), config.n_chains, family.dim

    init = np.asarray(init, np.float64).reshape(-1)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    x = np.broadcast_to(init, (c, r, d)).copy()
    if not family.prior.in_support_batch(init[None, :])[0]:
        raise OutOfSupportError("initial state outside prior support")

    def posterior_parts(flat):
        lp = family.prior.log_density_batch(flat)
        ll = np.full(flat.shape[0], -np.inf)
        ok = np.isfinite(lp)
        if ok.any():
            ll[ok] = family.log_lik_batch(flat[ok])
        return lp, ll

    logprior, loglik = (a.reshape(c, r) for a in posterior_parts(x.reshape(-1, d)))
    logpost = logprior + rungs[None, :] * loglik

    keep_iters = config.n_iterations - config.burn_in
    kept = np.empty((keep_iters, c, r, d))
    kept_ll = np.empty((keep_iters, c, r))
    accepts = np.zeros(r)
    swap_accepts = swap_trials = 0

    for it in range(config.n_iterations):
        prop = x + scales[None, :, None] * rng.standard_normal((c, r, d))
        lp, ll = (a.reshape(c, r) for a in posterior_parts(prop.reshape(-1, d)))
        lpost = lp + rungs[None, :] * ll
        with np.errstate(invalid="ignore"):
            accept = np.log(rng.random((c, r))) < lpost - logpost
        accept &= np.isfinite(lpost)
        x[accept] = prop[accept]
        logprior[accept], loglik[accept] = lp[accept], ll[accept]
        logpost[accept] = lpost[accept]
        accepts += accept.mean(axis=0)

        if r > 1 and (it + 1) % config.swap_interval == 0:
            start = (it // config.swap_interval) % 2
            for j in range(start, r - 1, 2):
                delta = (rungs[j + 1] - rungs[j]) * (loglik[:, j] - loglik[:, j + 1])
                do = np.log(rng.random(c)) < delta
                swap_trials += c
                swap_accepts += int(do.sum())
                x[do, j], x[do, j + 1] = x[do, j + 1].copy(), x[do, j].copy()
                for arr in (logprior, loglik):
                    arr[do, j], arr[do, j + 1] = arr[do, j + 1].copy(), arr[do, j].copy()
            logpost = logprior + rungs[None, :] * loglik

        if it >= config.burn_in:
            kept[it - config.burn_in] = x
            kept_ll[it - config.burn_in] = loglik

    out = {}
    for j, t in enumerate(rungs):
        # chain-major pool: a head/tail split then separates disjoint groups
        # of independent replicate ladders rather than early/late iterations
        pool = kept[:, :, j, :].transpose(1, 0, 2).reshape(-1, d)
        pool_ll = kept_ll[:, :, j].T.reshape(-1)
        idx = _thin(np.arange(pool.shape[0]), config.n_samples, config.subsample, rng)
        thetas = pool[idx]
        target = family.target_at(float(t))
        diag = {
            "acceptance_rate": float(accepts[j]) / config.n_iterations,
            "swap_acceptance_rate": (swap_accepts / swap_trials) if swap_trials else None,
            "log_likelihood": pool_ll[idx],
        }
        out[float(t)] = SampleBatch(thetas, target.score_batch(thetas),
                                    rng_seed=config.seed, diagnostics=diag)
    return out
