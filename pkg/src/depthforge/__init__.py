"""Two-stage depth enhancement: ensemble uncertainty from a robust image-guided
Gaussian Markov random field, then uncertainty-aware spatial propagation."""

from .core import NormalizationParams, denormalize_depth, normalize_depth, valid_mask
from .metrics import EvalReport, delta_k, evaluate, kendall_tau, rmse
from .protocols import run_pipeline
from .refine import RefineConfig, ScaleShiftFit, refine
from .stochastic import EnsembleStats, GmrfModel, GmrfParams, build_gmrf, estimate

__version__ = "0.1.0"

__all__ = [
    "EnsembleStats", "EvalReport", "GmrfModel", "GmrfParams", "NormalizationParams", "RefineConfig",
    "ScaleShiftFit", "build_gmrf", "delta_k", "denormalize_depth", "estimate", "evaluate", "kendall_tau",
    "normalize_depth", "refine", "rmse", "run_pipeline", "valid_mask",
]
