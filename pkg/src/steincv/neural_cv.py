"""Neural trial functions and the centered + regularized training objective.

The trial function is a fully connected net Phi: R^D -> R^D.  Training
minimizes (1/n) sum [(f_i + g_i - mu)^2 + lambda g_i^2] with
g_i = div Phi(theta_i) + Phi(theta_i) . score_i; mu is a trainable scalar
offset and lambda penalizes the empirical second moment of g.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .samplers import SampleBatch
from .stein_cv import CvModel


class TrainingDivergedError(RuntimeError):
    pass


_ACTIVATIONS = {"sigmoid": ad.sigmoid, "tanh": ad.tanh}


class Mlp:
    """Fully connected vector field with an affine final layer.

    `weights[i]` has shape (fan_in, fan_out) so the forward pass is
    x @ W + b throughout; hidden layers apply the activation, the last
    layer stays affine.
    """

    def __init__(self, weights, biases, activation: str = "sigmoid",
                 input_shift=None, input_scale=None):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.weights = [np.asarray(w, np.float64) for w in weights]
        self.biases = [np.asarray(b, np.float64) for b in biases]
        self.activation = activation
        self.dim = self.weights[0].shape[0]
        # optional fixed input standardization (x - shift) / scale applied
        # before the first layer; part of the trial function, not trained
        self.input_shift = (None if input_shift is None
                            else np.asarray(input_shift, np.float64))
        self.input_scale = (None if input_scale is None
                            else np.asarray(input_scale, np.float64))

    @classmethod
    def random(cls, dim: int, hidden=(40, 40), activation: str = "sigmoid",
               rng=None) -> "Mlp":
        """Scaled-uniform fan-in initialization, U(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
        rng = rng or np.random.Generator(np.random.PCG64(0))
        sizes = (dim, *hidden, dim)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, fan_out))
        return cls(weights, biases, activation)

    @property
    def sizes(self):
        return (self.dim, *(w.shape[1] for w in self.weights))

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x, params=None):
        """Forward pass; `x` and `params` may be arrays, Tensors, or Duals."""
        if params is None:
            params = self.parameters()
        act = _ACTIVATIONS[self.activation]
        h = x
        if self.input_shift is not None:
            h = (h - self.input_shift) * (1.0 / self.input_scale)
        n_layers = len(params) // 2
        for i in range(n_layers):
            w, b = params[2 * i], params[2 * i + 1]
            h = ad.matmul_any(h, w) + b
            if i < n_layers - 1:
                h = act(h)
        return h

    __call__ = forward

    def field(self, params):
        return lambda x: self.forward(x, params)


def mlp_forward(net: Mlp, theta) -> np.ndarray:
    theta = np.asarray(theta, np.float64)
    single = theta.ndim == 1
    out = net.forward(np.atleast_2d(theta))
    return out[0] if single else out


@dataclass
class TrainConfig:
    lam: float = 0.1
    mu_init: str = "sample-mean"        # zero | sample-mean | pretrain
    pretrain_lam: float = 1.0
    learning_rate: float = 1e-3
    epochs: int = 2000
    minibatch: int = 64
    seed: int = 0
    hidden: tuple = (40, 40)
    activation: str = "sigmoid"
    optimizer: str = "sgd"              # sgd | adam
    center: bool = True                 # False pins mu at 0 (ablation schemes)
    standardize: bool = False           # feed (theta - mean) / sd to the net
    plateau_window: int = 50
    plateau_tol: float = 1e-4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.mu_init not in ("zero", "sample-mean", "pretrain"):
            raise ValueError(f"unknown mu_init strategy {self.mu_init!r}")
        if self.mu_init == "pretrain" and self.pretrain_lam <= self.lam:
            raise ValueError("pretrain_lam must exceed lam")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class LossBreakdown:
    total: float
    fit: float
    regularizer: float
    mu: float


def _loss_graph(net: Mlp, params, thetas, scores, f_values, mu, lam: float):
    """Tape graph of the training loss on one (sub)batch.

    Returns (total, fit, reg) Tensors; `params` are Tensors, `mu` is a scalar
    Tensor (or 0.0 for uncentered schemes).
    """
    phi, div = ad.field_with_divergence(net.field(params), thetas)
    g = div + ad.tsum(phi * scores, axis=1)
    if np.isnan(g.value).any():
        idx = int(np.flatnonzero(np.isnan(g.value))[0])
        raise TrainingDivergedError(
            f"NaN control variate at sample {idx}; weight scale "
            f"{max(np.abs(w).max() for w in net.weights):.3g}")
    resid = g + f_values - mu
    fit = ad.tmean(resid * resid)
    reg = ad.tmean(g * g)
    total = fit + lam * reg
    return total, fit, reg, g


def ncv_loss(batch: SampleBatch, net: Mlp) -> LossBreakdown:
    """Plain empirical-variance objective (1/n) sum (f_i + g_i)^2."""
    return cncv_loss(batch, net, mu=0.0, lam=0.0)


def cncv_loss(batch: SampleBatch, net: Mlp, mu: float, lam: float) -> LossBreakdown:
    if batch.f_values is None:
        raise ValueError("batch.f_values must be filled")
    total, fit, reg, _ = _loss_graph(net, None, batch.thetas, batch.scores,
                                     batch.f_values, float(mu), lam)
    return LossBreakdown(total=float(total.value), fit=float(fit.value),
                         regularizer=float(reg.value), mu=float(mu))


class _Optimizer:
    def __init__(self, params, lr: float, kind: str):
        self.params = params
        self.lr = lr
        self.kind = kind
        self.t = 0
        if kind == "adam":
            self.m = [np.zeros_like(p.value) for p in params]
            self.v = [np.zeros_like(p.value) for p in params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingDivergedError("non-finite gradient")
            if self.kind == "sgd":
                p.value -= self.lr * g
            else:
                b1, b2, eps = 0.9, 0.999, 1e-8
                self.m[i] = b1 * self.m[i] + (1 - b1) * g
                self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
                mh = self.m[i] / (1 - b1 ** self.t)
                vh = self.v[i] / (1 - b2 ** self.t)
                p.value -= self.lr * mh / (np.sqrt(vh) + eps)


def _run_epochs(net, params, mu_t, batch, lam, config, epochs, rng, stop_on_plateau):
    trainable = list(params) + ([mu_t] if mu_t is not None else [])
    opt = _Optimizer(trainable, config.learning_rate, config.optimizer)
    n = batch.n
    mb = min(config.minibatch, n)
    curve = []
    initial = None
    over_budget = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, mb):
            idx = perm[start:start + mb]
            mu_arg = mu_t if mu_t is not None else 0.0
            total, _, _, _ = _loss_graph(net, params, batch.thetas[idx],
                                         batch.scores[idx], batch.f_values[idx],
                                         mu_arg, lam)
            ad.backward(total)
            opt.step()
            epoch_loss += float(total.value) * len(idx)
        epoch_loss /= n
        curve.append(epoch_loss)
        if initial is None:
            initial = epoch_loss
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError("non-finite training loss")
        over_budget = over_budget + 1 if epoch_loss > 10.0 * initial else 0
        if over_budget >= 5:
            raise TrainingDivergedError(
                f"loss exceeded 10x its initial value for 5 epochs "
                f"({epoch_loss:.3g} vs {initial:.3g})")
        if stop_on_plateau and len(curve) > config.plateau_window:
            prev = curve[-config.plateau_window - 1]
            if prev != 0 and abs(curve[-1] - prev) / abs(prev) < config.plateau_tol:
                break
        # keep parameter arrays synced with the net for checkpoints/eval
        for p_np, p_t in zip(net.parameters(), params):
            p_np[...] = p_t.value
    return curve


def train_cncv(train: SampleBatch, config: TrainConfig) -> CvModel:
    """Minibatch gradient descent on the centered + regularized objective.

    mu initialization follows the configured strategy: zero; the sample mean
    of f; or a pretraining phase with the larger `pretrain_lam` whose
    converged mu is kept while the weights are re-drawn.
    """
    if train.f_values is None:
        raise ValueError("train.f_values must be filled")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    net = Mlp.random(train.dim, config.hidden, config.activation, rng)
    if config.standardize:
        net.input_shift = train.thetas.mean(axis=0)
        net.input_scale = np.maximum(train.thetas.std(axis=0), 1e-8)
    params = [Tensor(p) for p in net.parameters()]

    curve = []
    if not config.center:
        mu_t = None
    elif config.mu_init == "zero":
        mu_t = Tensor(0.0)
    elif config.mu_init == "sample-mean":
        mu_t = Tensor(float(train.f_values.mean()))
    else:  # pretrain
        mu_t = Tensor(float(train.f_values.mean()))
        curve += _run_epochs(net, params, mu_t, train, config.pretrain_lam,
                             config, config.epochs, rng, stop_on_plateau=True)
        fresh = Mlp.random(train.dim, config.hidden, config.activation, rng)
        for p_np, p_t, w in zip(net.parameters(), params, fresh.parameters()):
            p_np[...] = w
            p_t.value = w.copy()
        mu_t = Tensor(float(mu_t.value))

    curve += _run_epochs(net, params, mu_t, train, config.lam, config,
                         config.epochs, rng, stop_on_plateau=False)

    mu = float(mu_t.value) if mu_t is not None else 0.0

    def g_fn(thetas, scores, _net=net):
        phi, div = ad.field_with_divergence(_net, np.atleast_2d(thetas))
        return div.value + (phi.value * np.atleast_2d(scores)).sum(axis=1)

    return CvModel("neural", mu, g_fn,
                   payload={"net": net, "loss_curve": curve, "config": config})


# -- checkpoints ------------------------------------------------------------


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(repr(config).encode()).hexdigest()[:16]


def save_checkpoint(path, net: Mlp, mu: float, config: Optional[TrainConfig] = None):
    """Flat text record: sizes, activation, weights row-major, mu, config hash."""
    with open(path, "w") as fh:
        fh.write("steincv-checkpoint v1\n")
        fh.write(" ".join(str(s) for s in net.sizes) + "\n")
        fh.write(net.activation + "\n")
        if net.input_shift is None:
            fh.write("raw-inputs\n")
        else:
            fh.write("standardized "
                     + " ".join(repr(float(v)) for v in net.input_shift) + " "
                     + " ".join(repr(float(v)) for v in net.input_scale) + "\n")
        for w, b in zip(net.weights, net.biases):
            for row in w:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
            fh.write(" ".join(repr(float(v)) for v in b) + "\n")
        fh.write(repr(float(mu)) + "\n")
        fh.write((config_hash(config) if config is not None else "-") + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if lines[0] != "steincv-checkpoint v1":
        raise ValueError("not a steincv checkpoint")
    sizes = [int(s) for s in lines[1].split()]
    activation = lines[2]
    shift = scale = None
    if lines[3].startswith("standardized"):
        vals = [float(v) for v in lines[3].split()[1:]]
        dim = sizes[0]
        shift, scale = np.array(vals[:dim]), np.array(vals[dim:])
    weights, biases = [], []
    pos = 4
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        w = np.array([[float(v) for v in lines[pos + i].split()]
                      for i in range(fan_in)])
        pos += fan_in
        b = np.array([float(v) for v in lines[pos].split()])
        pos += 1
        weights.append(w.reshape(fan_in, fan_out))
        biases.append(b)
    mu = float(lines[pos])
    return Mlp(weights, biases, activation, shift, scale), mu
