"""Adaptive loose optimization for bias-robust question answering, at desk scale."""

from .autodiff import ConfigError, DimensionError, NumericError, Tape, Tensor, backward, sgd_step
from .datagen import BiasedClassConfig, SpanConfig, gen_span_like, gen_vqa_like
from .debias import StrategyKind
from .harness import ExperimentConfig, evaluate, grid_run, run_experiment, train
from .losses import LooseState, LossConfig, alo_loss, cross_entropy, focal_loss, gamma, span_losses
from .metrics import harmonic_mean, open_ended_accuracy, standard_accuracy, token_f1

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "NumericError",
    "Tape",
    "Tensor",
    "backward",
    "sgd_step",
    "BiasedClassConfig",
    "SpanConfig",
    "gen_span_like",
    "gen_vqa_like",
    "StrategyKind",
    "ExperimentConfig",
    "evaluate",
    "grid_run",
    "run_experiment",
    "train",
    "LooseState",
    "LossConfig",
    "alo_loss",
    "cross_entropy",
    "focal_loss",
    "gamma",
    "span_losses",
    "harmonic_mean",
    "open_ended_accuracy",
    "standard_accuracy",
    "token_f1",
]
