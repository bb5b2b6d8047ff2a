"""Failure-mode-aware survival prediction with multi-output Gaussian process signals."""

from .cmgp import CMGPModel, CMGPRegressor, InducingGrid, fit_group, predict_f, sample_f_paths
from .exceptions import ConfigError, ContractError, NumericalError
from .inference import Priors, VariationalState, fit_variational
from .kernels import LatentKernelParams, SmoothingKernelParams
from .model import Dataset, MFGPCox
from .prediction import (ModePosterior, PredictionResult, SurvivalCurve, conditional_survival,
                         evaluate_metrics, marginal_survival, mode_posterior, rul_estimate)
from .simulate import SimConfig, default_config, make_dataset

__version__ = "0.1.0"

__all__ = [
    "CMGPModel", "CMGPRegressor", "ConfigError", "ContractError", "Dataset", "InducingGrid",
    "LatentKernelParams", "MFGPCox", "ModePosterior", "NumericalError", "PredictionResult",
    "Priors", "SimConfig", "SmoothingKernelParams", "SurvivalCurve", "VariationalState",
    "conditional_survival", "default_config", "evaluate_metrics", "fit_group", "fit_variational",
    "make_dataset", "marginal_survival", "mode_posterior", "predict_f", "rul_estimate",
    "sample_f_paths",
]
