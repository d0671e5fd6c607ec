"""Longitudinal covariate-assisted projection regression for covariance
matrix outcomes.

Finds a common linear projection whose projected variance follows a
log-linear mixed model in visit-level covariates, with pooled linear
shrinkage covariance estimation, sequential component extraction, and
subject-level bootstrap inference.
"""

__version__ = "0.1.0"

from .covariance import (CovarianceSet, ShrinkageStats, build_h,
                         sample_covariance, sample_covariance_set,
                         shrink_covariances, shrinkage_stats)
from .dataset import (DataFormatError, LongitudinalDataset, ValidationReport,
                      VisitBlock, center_dataset, load_dataset, save_dataset,
                      validate_dataset)
from .estimation import (ComponentSet, FitConfig, FitResult, dfd,
                         fit_components, fit_single_component,
                         newton_update_fixed_effects, newton_update_intercepts,
                         update_gamma)
from .inference import (BootstrapDistribution, ConfidenceInterval,
                        bootstrap_coefficients, confidence_interval)
from .likelihood import (LikelihoodParts, ModelParams, grad_hess_beta0i,
                         grad_hess_beta1, neg_hloglik, update_hyperparams)
from .simulation import (CapMixResult, MetricsReport, SimConfig, SimTruth,
                         cap_mix_baseline, evaluate_fit, generate_dataset,
                         match_component, run_experiment, similarity)

__all__ = [
    "BootstrapDistribution", "CapMixResult", "ComponentSet",
    "ConfidenceInterval", "CovarianceSet", "DataFormatError", "FitConfig",
    "FitResult", "LikelihoodParts", "LongitudinalDataset", "MetricsReport",
    "ModelParams", "ShrinkageStats", "SimConfig", "SimTruth",
    "ValidationReport", "VisitBlock", "bootstrap_coefficients", "build_h",
    "cap_mix_baseline", "center_dataset", "confidence_interval", "dfd",
    "evaluate_fit", "fit_components", "fit_single_component",
    "generate_dataset", "grad_hess_beta0i", "grad_hess_beta1", "load_dataset",
    "match_component", "neg_hloglik", "newton_update_fixed_effects",
    "newton_update_intercepts", "run_experiment", "sample_covariance",
    "sample_covariance_set", "save_dataset", "shrink_covariances",
    "shrinkage_stats", "similarity", "update_gamma", "update_hyperparams",
    "validate_dataset",
]
