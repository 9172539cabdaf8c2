"""Goodwin oscillator forward model, fixed-step integration with forward
sensitivities, Gaussian likelihood, and power-posterior targets.

Parameter vector ordering is (a1, a2, alpha, k1, ..., k_{g-1}), so D = g + 2.
The Hill exponent rho is not a sampled parameter; it defaults to 8.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .samplers import PowerFamily
from .targets import GammaPrior, PowerPosterior


class OdeBlowUpError(RuntimeError):
    def __init__(self, t_last: float):
        super().__init__(f"state became non-finite; last good time {t_last}")
        self.t_last = t_last


@dataclass(frozen=True)
class GoodwinParams:
    a1: float
    a2: float
    alpha: float
    ks: tuple
    rho: int = 8

    def __post_init__(self):
        vals = (self.a1, self.a2, self.alpha, *self.ks)
        if any(v <= 0 for v in vals) or self.rho <= 0:
            raise ValueError("all Goodwin parameters must be positive")

    @property
    def g(self) -> int:
        return len(self.ks) + 1

    @property
    def dim(self) -> int:
        return self.g + 2

    def to_vector(self) -> np.ndarray:
        return np.array([self.a1, self.a2, self.alpha, *self.ks])

    @classmethod
    def from_vector(cls, vec, rho: int = 8) -> "GoodwinParams":
        vec = np.asarray(vec, float)
        return cls(vec[0], vec[1], vec[2], tuple(vec[3:]), rho)


def default_params(g: int) -> GoodwinParams:
    """Data-generating parameters: a1=1, a2=3, k1=2, remaining k=1, alpha=0.5."""
    ks = (2.0,) + (1.0,) * (g - 2)
    return GoodwinParams(1.0, 3.0, 0.5, ks)


def _rhs_batch(x: np.ndarray, theta: np.ndarray, rho: int) -> np.ndarray:
    """Vectorized right-hand side; x is (m, g), theta is (m, g+2)."""
    a1, a2, alpha = theta[:, 0], theta[:, 1], theta[:, 2]
    ks = theta[:, 3:]
    xg = x[:, -1]
    denom = 1.0 + a2 * xg ** rho
    dx = np.empty_like(x)
    dx[:, 0] = a1 / denom - alpha * x[:, 0]
    dx[:, 1:] = ks * x[:, :-1] - alpha[:, None] * x[:, 1:]
    return dx


def goodwin_rhs(x, params: GoodwinParams) -> np.ndarray:
    x = np.asarray(x, float)
    return _rhs_batch(x[None, :], params.to_vector()[None, :], params.rho)[0]


def _aug_rhs_batch(x, sens, theta, rho):
    """Augmented right-hand side: d/ds of the (m, g, D) sensitivity block."""
    m, g = x.shape
    a1, a2, alpha = theta[:, 0], theta[:, 1], theta[:, 2]
    xg = x[:, -1]
    denom = 1.0 + a2 * xg ** rho
    dx = _rhs_batch(x, theta, rho)

    dsens = np.empty_like(sens)
    # J_x . S  (J_x row 0: -alpha at col 0, df1/dxg at col g-1; row i: k_{i-1}, -alpha)
    df1_dxg = -a1 * a2 * rho * xg ** (rho - 1) / denom ** 2
    dsens[:, 0, :] = (-alpha[:, None] * sens[:, 0, :]
                      + df1_dxg[:, None] * sens[:, g - 1, :])
    dsens[:, 1:, :] = (theta[:, 3:, None] * sens[:, :-1, :]
                       - alpha[:, None, None] * sens[:, 1:, :])
    # + df/dtheta
    dsens[:, 0, 0] += 1.0 / denom
    dsens[:, 0, 1] += -a1 * xg ** rho / denom ** 2
    dsens[:, 0, 2] += -x[:, 0]
    dsens[:, 1:, 2] += -x[:, 1:]
    for i in range(1, g):
        dsens[:, i, 2 + i] += x[:, i - 1]
    return dx, dsens


def _integrate_batch(theta: np.ndarray, g: int, rho: int, t_end: float,
                     step: float, with_sensitivities: bool, obs_idx=None):
    """Classical RK4 over [0, t_end] from x0 = 0 for a (m, D) parameter batch.

    Returns (times, states, sens) where states is (n_out, m, g); `obs_idx`
    restricts stored outputs to the given step indices (time 0 is index 0).
    """
    theta = np.atleast_2d(np.asarray(theta, float))
    m = theta.shape[0]
    n_steps = int(round(t_end / step))
    x = np.zeros((m, g))
    sens = np.zeros((m, g, theta.shape[1])) if with_sensitivities else None

    store_all = obs_idx is None
    idx_set = None if store_all else set(int(i) for i in obs_idx)
    times, states, sens_out = [], [], []

    def record(i):
        if store_all or i in idx_set:
            times.append(i * step)
            states.append(x.copy())
            if with_sensitivities:
                sens_out.append(sens.copy())

    record(0)
    for i in range(n_steps):
        if with_sensitivities:
            k1x, k1s = _aug_rhs_batch(x, sens, theta, rho)
            k2x, k2s = _aug_rhs_batch(x + 0.5 * step * k1x, sens + 0.5 * step * k1s,
                                      theta, rho)
            k3x, k3s = _aug_rhs_batch(x + 0.5 * step * k2x, sens + 0.5 * step * k2s,
                                      theta, rho)
            k4x, k4s = _aug_rhs_batch(x + step * k3x, sens + step * k3s, theta, rho)
            x = x + (step / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
            sens = sens + (step / 6.0) * (k1s + 2 * k2s + 2 * k3s + k4s)
        else:
            k1 = _rhs_batch(x, theta, rho)
            k2 = _rhs_batch(x + 0.5 * step * k1, theta, rho)
            k3 = _rhs_batch(x + 0.5 * step * k2, theta, rho)
            k4 = _rhs_batch(x + step * k3, theta, rho)
            x = x + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(x).all():
            raise OdeBlowUpError(i * step)
        record(i + 1)

    return (np.array(times), np.stack(states),
            np.stack(sens_out) if with_sensitivities else None)


@dataclass
class Trajectory:
    times: np.ndarray                  # (n_out,)
    states: np.ndarray                 # (n_out, g)
    sensitivities: Optional[np.ndarray] = None   # (n_out, g, D)


def integrate(params: GoodwinParams, x0=None, t_end: float = 80.0,
              step: float = 0.05, with_sensitivities: bool = False) -> Trajectory:
    """Single-parameter RK4 integration from the zero initial state."""
    if step <= 0:
        raise ValueError("step must be positive")
    if x0 is not None and np.any(np.asarray(x0) != 0.0):
        raise ValueError("only the zero initial state is supported")
    times, states, sens = _integrate_batch(
        params.to_vector()[None, :], params.g, params.rho, t_end, step,
        with_sensitivities)
    return Trajectory(times, states[:, 0, :],
                      None if sens is None else sens[:, 0, :, :])


# -- data and likelihood ----------------------------------------------------

OBS_TIMES = np.arange(41, 81, dtype=float)        # integer times 41..80


@dataclass
class GoodwinData:
    times: np.ndarray                  # (40,)
    observations: np.ndarray           # (40, g)
    sigma: float
    params_true: GoodwinParams
    seed: int

    @property
    def g(self) -> int:
        return self.observations.shape[1]


def generate_data(params: GoodwinParams, sigma: float = 0.1, seed: int = 0,
                  step: float = 0.05) -> GoodwinData:
    obs_idx = (OBS_TIMES / step).round().astype(int)
    _, states, _ = _integrate_batch(params.to_vector()[None, :], params.g,
                                    params.rho, 80.0, step, False, obs_idx)
    rng = np.random.Generator(np.random.PCG64(seed))
    y = states[:, 0, :] + sigma * rng.standard_normal((len(OBS_TIMES), params.g))
    return GoodwinData(OBS_TIMES.copy(), y, sigma, params, seed)


def save_data(data: GoodwinData, path):
    with open(path, "w") as fh:
        fh.write(f"# sigma {data.sigma!r}\n")
        fh.write(f"# rho {data.params_true.rho}\n")
        fh.write("# params " + " ".join(repr(float(v))
                                        for v in data.params_true.to_vector()) + "\n")
        fh.write(f"# seed {data.seed}\n")
        for t, row in zip(data.times, data.observations):
            fh.write(f"{t:g} " + " ".join(repr(float(v)) for v in row) + "\n")


def load_data(path) -> GoodwinData:
    header, rows = {}, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, *vals = line[1:].split()
                header[key] = vals
            else:
                rows.append([float(v) for v in line.split()])
    arr = np.array(rows)
    params = GoodwinParams.from_vector(
        [float(v) for v in header["params"]], rho=int(header["rho"][0]))
    return GoodwinData(arr[:, 0], arr[:, 1:], float(header["sigma"][0]),
                       params, int(header["seed"][0]))


class GoodwinLikelihood:
    """Gaussian observation likelihood of the Goodwin trajectory.

    ODE blow-ups and non-positive parameters map to -inf log-likelihood with a
    zero gradient, which samplers simply reject.
    """

    def __init__(self, data: GoodwinData, rho: int = 8, step: float = 0.05):
        self.data = data
        self.rho = rho
        self.step = step
        self.g = data.g
        self.dim = self.g + 2
        self._obs_idx = (data.times / step).round().astype(int)
        self._const = (-0.5 * data.observations.size
                       * np.log(2.0 * np.pi * data.sigma ** 2))

    def _solve(self, thetas, with_grad):
        thetas = np.atleast_2d(np.asarray(thetas, float))
        m = thetas.shape[0]
        vals = np.full(m, -np.inf)
        grads = np.zeros((m, self.dim))
        ok = np.all(thetas > 0.0, axis=1) & np.isfinite(thetas).all(axis=1)
        if ok.any():
            try:
                _, states, sens = _integrate_batch(
                    thetas[ok], self.g, self.rho, 80.0, self.step,
                    with_grad, self._obs_idx)
            except OdeBlowUpError:
                # fall back to row-by-row so one divergent parameter set does
                # not poison the whole batch
                states = sens = None
            if states is not None:
                resid = self.data.observations[:, None, :] - states   # (T, m_ok, g)
                vals[ok] = (self._const
                            - 0.5 * (resid ** 2).sum(axis=(0, 2)) / self.data.sigma ** 2)
                if with_grad:
                    grads[ok] = np.einsum("tmg,tmgd->md", resid, sens) / self.data.sigma ** 2
            else:
                idx = np.flatnonzero(ok)
                for i in idx:
                    try:
                        _, st, sn = _integrate_batch(
                            thetas[i][None, :], self.g, self.rho, 80.0,
                            self.step, with_grad, self._obs_idx)
                    except OdeBlowUpError:
                        continue
                    r = self.data.observations - st[:, 0, :]
                    vals[i] = self._const - 0.5 * (r ** 2).sum() / self.data.sigma ** 2
                    if with_grad:
                        grads[i] = np.einsum("tg,tgd->d", r, sn[:, 0, :, :]) / self.data.sigma ** 2
        return vals, grads

    def value_batch(self, thetas):
        return self._solve(thetas, False)[0]

    def value_and_grad_batch(self, thetas):
        return self._solve(thetas, True)


def goodwin_log_likelihood(params: GoodwinParams, data: GoodwinData,
                           step: float = 0.05):
    """Log-likelihood and its parameter gradient at a single parameter point."""
    lik = GoodwinLikelihood(data, rho=params.rho, step=step)
    vals, grads = lik.value_and_grad_batch(params.to_vector()[None, :])
    return float(vals[0]), grads[0]


def goodwin_power_posterior(t: float, data: GoodwinData, rho: int = 8,
                            step: float = 0.05) -> PowerPosterior:
    prior = GammaPrior(dim=data.g + 2)
    return PowerPosterior(prior, GoodwinLikelihood(data, rho, step), t)


def goodwin_power_family(data: GoodwinData, rho: int = 8,
                         step: float = 0.05) -> PowerFamily:
    return PowerFamily(GammaPrior(dim=data.g + 2),
                       GoodwinLikelihood(data, rho, step))
