"""Differentiable lesion-morphology features and a consistency-regularized multi-task objective."""

__version__ = "0.1.0"

from .errors import (BiradsError, ConfigError, InsufficientDataError, InvalidInputError,
                     InvalidSpecError, UndefinedMetricError, UninitializedNormalizerError,
                     UnsupportedGraphError)
from .features import EmaNormalizer, FeatureVector, compute_features, feature_vector, raw_features
from .losses import LossBreakdown, LossHyper, SampleTargets, batch_objective, total_loss
from .metrics import EvalReport, WilcoxonResult, auc, dice, wilcoxon_signed_rank
from .model import Checkpoint, NetConfig, ToyNet, load_checkpoint
from .prior import BIRADS_INIT, PriorWeights, composite_score, init_weights, weight_penalty
from .synthetic import LesionSpec, SyntheticSample, generate, make_dataset
from .trainer import SweepResult, TrainConfig, alpha_sweep, evaluate, train

__all__ = [
    "__version__", "BiradsError", "ConfigError", "InsufficientDataError", "InvalidInputError",
    "InvalidSpecError", "UndefinedMetricError", "UninitializedNormalizerError",
    "UnsupportedGraphError", "EmaNormalizer", "FeatureVector", "compute_features",
    "feature_vector", "raw_features", "LossBreakdown", "LossHyper", "SampleTargets",
    "batch_objective", "total_loss", "EvalReport", "WilcoxonResult", "auc", "dice",
    "wilcoxon_signed_rank", "Checkpoint", "NetConfig", "ToyNet", "load_checkpoint",
    "BIRADS_INIT", "PriorWeights", "composite_score", "init_weights", "weight_penalty",
    "LesionSpec", "SyntheticSample", "generate", "make_dataset", "SweepResult", "TrainConfig",
    "alpha_sweep", "evaluate", "train",
]
