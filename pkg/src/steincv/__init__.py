"""Stein control variates for Monte Carlo variance reduction.

Subpackages cover a small array autodiff engine, scored target
distributions, samplers, polynomial/kernel/neural control variates,
the Goodwin oscillator model, thermodynamic integration, and a CLI
experiment harness.
"""

from .samplers import SampleBatch, ChainConfig
from .stein_cv import (CvModel, VarianceReport, stein_g, laplacian_g,
                       fit_linear_cv, fit_quadratic_cv, fit_control_functional,
                       variance_reduction_ratio)
from .neural_cv import Mlp, TrainConfig, train_cncv, ncv_loss, cncv_loss

__all__ = [
    "SampleBatch", "ChainConfig", "CvModel", "VarianceReport",
    "stein_g", "laplacian_g", "fit_linear_cv", "fit_quadratic_cv",
    "fit_control_functional", "variance_reduction_ratio",
    "Mlp", "TrainConfig", "train_cncv", "ncv_loss", "cncv_loss",
]

__version__ = "0.1.0"
