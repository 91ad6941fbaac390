"""Balanced truncation for linear Gaussian data assimilation.

Time-limited and infinite Gramians, square-root balanced truncation,
reduced Bayesian posteriors for initial-condition inference, the optimal
low-rank baseline, reduced 4D-Var, and an experiment harness.
"""

from . import errors, fourdvar, gramians, harness, inference, linalg, metrics, models, reduction
from .errors import (
    BalredError,
    ConfigError,
    DimensionError,
    NumericalError,
    RankError,
    StabilityError,
)
from .gramians import GramianPair, lg_gramians, tl_noisy_observability, tl_reachability
from .inference import full_posterior, olr_posterior, reduced_posterior
from .models import InferenceSetup, LtiSystem
from .reduction import BalancedReduction, hankel_values, square_root_bt

__version__ = "0.1.0"

__all__ = [
    "errors", "fourdvar", "gramians", "harness", "inference", "linalg", "metrics",
    "models", "reduction", "BalredError", "ConfigError", "DimensionError",
    "NumericalError", "RankError", "StabilityError", "GramianPair", "lg_gramians",
    "tl_noisy_observability", "tl_reachability", "full_posterior", "olr_posterior",
    "reduced_posterior", "InferenceSetup", "LtiSystem", "BalancedReduction",
    "hankel_values", "square_root_bt",
]
