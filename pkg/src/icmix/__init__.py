"""Proportional hazards mixture model for interval-censored data with
instantaneous failures, fitted by a latent-Poisson EM algorithm."""

__version__ = "0.1.0"

from icmix.em import FitConfig, FitResult, LatentExpectations, e_step, fit  # noqa: E402
from icmix.model import (  # noqa: E402
    Dataset,
    Observation,
    ParameterVector,
    baseline_survival,
    classify_observation,
    mixture_cdf,
    observed_loglik,
)
from icmix.splines import Basis, BasisKind, BasisSpec, build_basis, default_knots  # noqa: E402
from icmix.variance import opg_covariance, score_rows, wald_interval  # noqa: E402

__all__ = [
    "Basis",
    "BasisKind",
    "BasisSpec",
    "Dataset",
    "FitConfig",
    "FitResult",
    "LatentExpectations",
    "Observation",
    "ParameterVector",
    "baseline_survival",
    "build_basis",
    "classify_observation",
    "default_knots",
    "e_step",
    "fit",
    "mixture_cdf",
    "observed_loglik",
    "opg_covariance",
    "score_rows",
    "wald_interval",
]
