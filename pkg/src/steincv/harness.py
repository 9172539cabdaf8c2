"""Config-driven experiment runners with deterministic seeding and CSV output.

A master seed expands into per-cell seeds through a splitmix-style mix of the
cell's identity, so partial reruns and thread pools reproduce the same rows.
Result rows are sorted before writing, never emitted in arrival order.
"""

from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import goodwin
from .evidence import ConjugateGaussianModel, TemperatureLadder, ti_log_evidence
from .neural_cv import TrainConfig, save_checkpoint, train_cncv
from .samplers import ChainConfig, SampleBatch, parallel_tempering, sample_mixture_iid
from .stein_cv import (fit_control_functional, fit_linear_cv, fit_quadratic_cv,
                       variance_reduction_ratio)
from .targets import symmetric_mixture


class ConfigError(ValueError):
    pass


# -- deterministic seeding --------------------------------------------------

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive_seed(master: int, *parts) -> int:
    """Stable per-cell seed: master seed mixed with a hash of the cell identity."""
    key = "/".join(str(p) for p in parts).encode()
    h = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
    return splitmix64((master ^ h) & _MASK) % (1 << 63)


# -- config schema ----------------------------------------------------------

def _bool(token) -> bool:
    if isinstance(token, bool):
        return token
    text = str(token).strip().lower()
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {token!r}")


# key -> (python type of the elements, is_list, default)
_SCHEMAS = {
    "synthetic": {
        "dim_for_n_sweep": (int, False, 10),
        "n_grid": (int, True, [500, 1000, 2000, 5000]),
        "dim_grid": (int, True, [5, 10, 20, 30]),
        "n_for_dim_sweep": (int, False, 5000),
        "n_test": (int, False, 500),
        "methods": (str, True, ["linear", "quadratic", "cf", "cncv"]),
        "seeds": (int, True, [0, 1, 2]),
        "lam": (float, False, 0.01),
        "mu_init": (str, False, "sample-mean"),
        "learning_rate": (float, False, 3e-3),
        "epochs": (int, False, 400),
        "minibatch": (int, False, 256),
        "optimizer": (str, False, "adam"),
        "hidden": (int, True, [40, 40]),
        "activation": (str, False, "sigmoid"),
        "standardize": (_bool, False, False),
        "cf_ridge": (float, False, 1e-3),
    },
    "ablation": {
        "dim": (int, False, 10),
        "amplitude": (float, False, 10.0),
        "mu0_grid": (float, True, [0.0, 3.0, 5.0, 7.0, 9.0]),
        "n_train": (int, False, 500),
        "n_test": (int, False, 500),
        "schemes": (str, True, ["ncv", "ncv-reg", "ncv-center", "cncv"]),
        "seeds": (int, True, [0, 1, 2]),
        "lam": (float, False, 0.1),
        "learning_rate": (float, False, 3e-3),
        "epochs": (int, False, 3000),
        "minibatch": (int, False, 64),
        "optimizer": (str, False, "adam"),
        "hidden": (int, True, [40, 40]),
        "activation": (str, False, "sigmoid"),
        "standardize": (_bool, False, False),
    },
    "goodwin-ti": {
        "g_grid": (int, True, [3]),
        "rho": (int, False, 8),
        "step": (float, False, 0.05),
        "sigma": (float, False, 0.1),
        "data_seed": (int, False, 0),
        "cv_rungs": (float, True, [0.1, 0.5, 1.0]),
        "ladder": (float, True, [0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.7, 1.0]),
        "proposal_scales": (float, True, [0.30, 0.14, 0.05, 0.028, 0.022,
                                          0.016, 0.012, 0.009]),
        "n_train": (int, False, 1000),
        "n_test": (int, False, 1000),
        "n_iterations": (int, False, 2500),
        "burn_in": (int, False, 1000),
        "n_chains": (int, False, 32),
        "swap_interval": (int, False, 5),
        "methods": (str, True, ["linear", "quadratic", "cf", "cncv"]),
        "ti_method": (str, False, "linear"),
        "seeds": (int, True, [0]),
        "lam": (float, False, 0.01),
        "mu_init": (str, False, "sample-mean"),
        "learning_rate": (float, False, 3e-3),
        "epochs": (int, False, 2000),
        "minibatch": (int, False, 128),
        "optimizer": (str, False, "adam"),
        "hidden": (int, True, [40, 40]),
        "activation": (str, False, "sigmoid"),
        "standardize": (_bool, False, True),
        "cf_ridge": (float, False, 1e-3),
    },
    "conjugate-check": {
        "n_data": (int, False, 20),
        "true_mean": (float, False, 1.0),
        "sigma": (float, False, 1.0),
        "prior_mean": (float, False, 0.0),
        "prior_var": (float, False, 9.0),
        "n_rungs": (int, False, 30),
        "ladder_exponent": (float, False, 5.0),
        "n_per_rung": (int, False, 2000),
        "method": (str, False, "none"),
        "seeds": (int, True, [0]),
    },
}


@dataclass
class ExperimentConfig:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _SCHEMAS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        schema = _SCHEMAS[self.kind]
        for key in self.params:
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} for [{self.kind}]")
        full = {}
        for key, (typ, is_list, default) in schema.items():
            if key in self.params:
                val = self.params[key]
                if is_list:
                    val = [typ(v) for v in val]
                else:
                    val = typ(val)
            else:
                val = list(default) if is_list else default
            full[key] = val
        self.params = full

    def __getitem__(self, key):
        return self.params[key]

    def to_text(self) -> str:
        lines = [f"[{self.kind}]"]
        for key, val in self.params.items():
            if isinstance(val, list):
                rendered = " ".join(repr(v) if isinstance(v, float) else str(v)
                                    for v in val)
            elif isinstance(val, float):
                rendered = repr(val)
            else:
                rendered = str(val)
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        kind, params = None, {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                if kind is not None:
                    raise ConfigError("only one experiment section per config")
                kind = line[1:-1].strip()
                continue
            if kind is None or "=" not in line:
                raise ConfigError(f"malformed config line {lineno}: {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            schema = _SCHEMAS.get(kind, {})
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} for [{kind}]")
            typ, is_list, _ = schema[key]
            tokens = val.split()
            if is_list:
                params[key] = [typ(t) for t in tokens]
            elif len(tokens) != 1:
                raise ConfigError(f"key {key!r} expects a single value")
            else:
                params[key] = typ(tokens[0])
        if kind is None:
            raise ConfigError("config has no experiment section")
        return cls(kind, params)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    @classmethod
    def default(cls, kind: str) -> "ExperimentConfig":
        return cls(kind, {})


# -- result rows ------------------------------------------------------------

RESULT_COLUMNS = ["experiment", "method", "dim", "n_train", "mu0", "t",
                  "ratio_train", "ratio_test", "corrected_mean", "raw_mean",
                  "seed", "flags"]


@dataclass
class ResultRow:
    experiment: str
    method: str
    dim: int
    n_train: int
    mu0: float = math.nan
    t: float = math.nan
    ratio_train: float = math.nan
    ratio_test: float = math.nan
    corrected_mean: float = math.nan
    raw_mean: float = math.nan
    seed: int = 0
    wall_time: float = 0.0
    flags: tuple = ()

    def sort_key(self):
        return (self.experiment, self.method, self.dim, self.n_train,
                self.mu0, self.t, self.seed)

    def csv_fields(self):
        return [self.experiment, self.method, str(self.dim), str(self.n_train),
                repr(float(self.mu0)), repr(float(self.t)),
                repr(float(self.ratio_train)), repr(float(self.ratio_test)),
                repr(float(self.corrected_mean)), repr(float(self.raw_mean)),
                str(self.seed), ";".join(self.flags)]


def write_results_csv(rows, path):
    """Deterministic CSV: sorted rows, repr-rendered floats, versioned header.

    Wall times go to the diagnostics log instead so reruns stay byte-identical.
    """
    rows = sorted(rows, key=ResultRow.sort_key)
    with open(path, "w") as fh:
        fh.write("# steincv results v1\n")
        fh.write(",".join(RESULT_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(row.csv_fields()) + "\n")


def _train_config_from(cfg: ExperimentConfig, seed: int, **overrides) -> TrainConfig:
    base = dict(
        lam=cfg["lam"],
        mu_init=cfg.params.get("mu_init", "sample-mean"),
        learning_rate=cfg["learning_rate"],
        epochs=cfg["epochs"],
        minibatch=cfg["minibatch"],
        optimizer=cfg["optimizer"],
        hidden=tuple(cfg["hidden"]),
        activation=cfg["activation"],
        standardize=cfg.params.get("standardize", False),
        seed=seed,
    )
    base.update(overrides)
    return TrainConfig(**base)


def fit_method(train: SampleBatch, method: str, cfg: ExperimentConfig, seed: int,
               **train_overrides):
    if method == "linear":
        return fit_linear_cv(train)
    if method == "quadratic":
        return fit_quadratic_cv(train)
    if method == "cf":
        return fit_control_functional(train, "median", cfg.params.get("cf_ridge", 1e-3))
    if method == "cncv":
        return train_cncv(train, _train_config_from(cfg, seed, **train_overrides))
    raise ConfigError(f"unsupported method {method!r}")


def _run_cells(cells, worker, threads: int):
    if threads <= 1:
        return [worker(cell) for cell in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, cells))


# -- experiments ------------------------------------------------------------


def run_synthetic(cfg: ExperimentConfig, master_seed: int = 0, threads: int = 1,
                  checkpoint_dir=None):
    """Variance-reduction ratios for f = sin(pi/D sum theta) under the
    symmetric two-component mixture, swept over training size and dimension."""
    settings = sorted({(cfg["dim_for_n_sweep"], n) for n in cfg["n_grid"]}
                      | {(d, cfg["n_for_dim_sweep"]) for d in cfg["dim_grid"]})
    cells = [(dim, n, method, rep)
             for dim, n in settings
             for method in cfg["methods"]
             for rep in cfg["seeds"]]

    def worker(cell):
        dim, n, method, rep = cell
        t0 = time.perf_counter()
        mixture = symmetric_mixture(dim)

        def f(thetas):
            return np.sin(np.pi / dim * thetas.sum(axis=1))

        train = sample_mixture_iid(
            mixture, n, derive_seed(master_seed, "synthetic", dim, n, rep, "train")
        ).with_f(f)
        test = sample_mixture_iid(
            mixture, cfg["n_test"],
            derive_seed(master_seed, "synthetic", dim, n, rep, "test")).with_f(f)
        row = ResultRow("synthetic", method, dim, n, seed=rep,
                        raw_mean=float(test.f_values.mean()))
        try:
            model = fit_method(train, method, cfg,
                               derive_seed(master_seed, "synthetic-fit", dim, n,
                                           method, rep))
            report = variance_reduction_ratio(model, test, train_batch=train)
            row = replace(row, ratio_train=report.ratio_train,
                          ratio_test=report.ratio_test,
                          corrected_mean=report.corrected_mean,
                          flags=tuple(report.flags))
            if checkpoint_dir is not None and model.kind == "neural":
                save_checkpoint(
                    f"{checkpoint_dir}/synthetic_d{dim}_n{n}_s{rep}.txt",
                    model.payload["net"], model.mu, model.payload["config"])
        except ValueError as exc:
            row = replace(row, flags=(f"fit-failed:{exc}",))
        return replace(row, wall_time=time.perf_counter() - t0)

    return _run_cells(cells, worker, threads)


_ABLATION_SCHEMES = {
    # (regularized, centered)
    "ncv": (False, False),
    "ncv-reg": (True, False),
    "ncv-center": (False, True),
    "cncv": (True, True),
}


def run_ablation(cfg: ExperimentConfig, master_seed: int = 0, threads: int = 1,
                 checkpoint_dir=None):
    """The four neural schemes on f = A sin(pi/D sum theta) + mu0 over a mu0 grid."""
    dim = cfg["dim"]
    mixture = symmetric_mixture(dim)
    cells = [(mu0, scheme, rep)
             for mu0 in cfg["mu0_grid"]
             for scheme in cfg["schemes"]
             for rep in cfg["seeds"]]

    def worker(cell):
        mu0, scheme, rep = cell
        t0 = time.perf_counter()
        regularized, centered = _ABLATION_SCHEMES[scheme]

        def f(thetas):
            return cfg["amplitude"] * np.sin(np.pi / dim * thetas.sum(axis=1)) + mu0

        train = sample_mixture_iid(
            mixture, cfg["n_train"],
            derive_seed(master_seed, "ablation", mu0, rep, "train")).with_f(f)
        test = sample_mixture_iid(
            mixture, cfg["n_test"],
            derive_seed(master_seed, "ablation", mu0, rep, "test")).with_f(f)
        row = ResultRow("ablation", scheme, dim, cfg["n_train"], mu0=mu0, seed=rep,
                        raw_mean=float(test.f_values.mean()))
        try:
            tc = _train_config_from(
                cfg, derive_seed(master_seed, "ablation-fit", mu0, scheme, rep),
                lam=cfg["lam"] if regularized else 0.0,
                center=centered, mu_init="zero")
            model = train_cncv(train, tc)
            report = variance_reduction_ratio(model, test, train_batch=train)
            row = replace(row, ratio_train=report.ratio_train,
                          ratio_test=report.ratio_test,
                          corrected_mean=report.corrected_mean,
                          flags=tuple(report.flags))
            if checkpoint_dir is not None:
                save_checkpoint(
                    f"{checkpoint_dir}/ablation_mu{mu0:g}_{scheme}_s{rep}.txt",
                    model.payload["net"], model.mu, tc)
        except ValueError as exc:
            row = replace(row, flags=(f"fit-failed:{exc}",))
        return replace(row, wall_time=time.perf_counter() - t0)

    return _run_cells(cells, worker, threads)


def _goodwin_rung_batches(cfg, g, master_seed, rep):
    """Parallel-tempering run returning {t: batch-with-loglik-f} for cv_rungs."""
    params = goodwin.default_params(g)
    data = goodwin.generate_data(params, cfg["sigma"], cfg["data_seed"], cfg["step"])
    family = goodwin.goodwin_power_family(data, cfg["rho"], cfg["step"])
    ladder = list(cfg["ladder"])
    for t in cfg["cv_rungs"]:
        if t not in ladder:
            raise ConfigError(f"cv rung {t} missing from the sampling ladder")
    scales = cfg["proposal_scales"]
    if len(scales) == 1:
        scales = [scales[0]] * len(ladder)
    if len(scales) != len(ladder):
        raise ConfigError("need one proposal scale, or one per ladder rung")
    chain = ChainConfig(
        n_iterations=cfg["n_iterations"], burn_in=cfg["burn_in"],
        proposal_scale=tuple(scales), temperature_rungs=tuple(ladder),
        swap_interval=cfg["swap_interval"],
        seed=derive_seed(master_seed, "goodwin-pt", g, rep),
        n_samples=cfg["n_train"] + cfg["n_test"], n_chains=cfg["n_chains"])
    init = params.to_vector()
    batches = parallel_tempering(family, chain, init)
    out = {}
    for t, batch in batches.items():
        out[t] = replace(batch, f_values=batch.diagnostics["log_likelihood"])
    return data, family, out


def run_goodwin_ti(cfg: ExperimentConfig, master_seed: int = 0, threads: int = 1,
                   checkpoint_dir=None):
    """Per-rung control variates on Goodwin power posteriors plus a TI estimate."""
    rows = []
    estimates = {}
    for g in cfg["g_grid"]:
        dim = g + 2
        for rep in cfg["seeds"]:
            data, family, batches = _goodwin_rung_batches(cfg, g, master_seed, rep)

            def cell_rows(t):
                batch = batches[t]
                train, test = batch.split(cfg["n_train"] / batch.n)
                out = []
                for method in cfg["methods"]:
                    t0 = time.perf_counter()
                    row = ResultRow("goodwin-ti", method, dim, train.n, t=t,
                                    seed=rep, raw_mean=float(test.f_values.mean()))
                    try:
                        model = fit_method(
                            train, method, cfg,
                            derive_seed(master_seed, "goodwin-fit", g, t, method, rep))
                        report = variance_reduction_ratio(model, test, train_batch=train)
                        row = replace(row, ratio_train=report.ratio_train,
                                      ratio_test=report.ratio_test,
                                      corrected_mean=report.corrected_mean,
                                      flags=tuple(report.flags))
                        if checkpoint_dir is not None and model.kind == "neural":
                            save_checkpoint(
                                f"{checkpoint_dir}/goodwin_g{g}_t{t:g}_s{rep}.txt",
                                model.payload["net"], model.mu,
                                model.payload["config"])
                    except ValueError as exc:
                        row = replace(row, flags=(f"fit-failed:{exc}",))
                    out.append(replace(row, wall_time=time.perf_counter() - t0))
                return out

            for chunk in _run_cells(list(cfg["cv_rungs"]), cell_rows, threads):
                rows.extend(chunk)

            # thermodynamic integral over the full ladder, prior rung included
            prior = family.prior
            prior_thetas = prior.sample(
                cfg["n_train"] + cfg["n_test"],
                derive_seed(master_seed, "goodwin-prior", g, rep))
            prior_batch = SampleBatch(
                prior_thetas, prior.score_batch(prior_thetas),
                f_values=family.log_lik_batch(prior_thetas))
            ladder_batches = {0.0: prior_batch, **batches}
            ti_rungs = (0.0, *sorted(batches))
            ladder = TemperatureLadder(ti_rungs, ladder_batches)
            est = ti_log_evidence(
                ladder, method=cfg["ti_method"],
                train_config=_train_config_from(
                    cfg, derive_seed(master_seed, "goodwin-ti-train", g, rep)))
            estimates[(g, rep)] = est
    return rows, estimates


def run_conjugate_check(cfg: ExperimentConfig, master_seed: int = 0,
                        threads: int = 1, checkpoint_dir=None):
    """TI on the conjugate Gaussian location model against its closed form."""
    from .samplers import power_law_rungs

    rows = []
    estimates = {}
    for rep in cfg["seeds"]:
        model = ConjugateGaussianModel.synthetic(
            cfg["n_data"], cfg["true_mean"], cfg["sigma"], cfg["prior_mean"],
            cfg["prior_var"],
            seed=derive_seed(master_seed, "conjugate-data", rep))
        rungs = power_law_rungs(cfg["n_rungs"], cfg["ladder_exponent"],
                                include_zero=True)
        ladder = model.build_ladder(
            rungs, cfg["n_per_rung"],
            derive_seed(master_seed, "conjugate-rungs", rep))
        est = ti_log_evidence(ladder, method=cfg["method"])
        oracle = model.log_evidence()
        estimates[rep] = (est, oracle)
        for res in est.rung_results:
            rows.append(ResultRow(
                "conjugate-check", cfg["method"], 1, cfg["n_per_rung"],
                t=res.t, ratio_test=res.ratio_test, corrected_mean=res.mean,
                raw_mean=res.raw_mean, seed=rep))
        rows.append(ResultRow(
            "conjugate-check", "ti-summary", 1, cfg["n_per_rung"],
            corrected_mean=est.log_evidence, raw_mean=oracle, seed=rep,
            flags=tuple(est.flags)))
    return rows, estimates
