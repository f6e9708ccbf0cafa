"""Desk-scale simulator for noise-robust federated learning on imbalanced synthetic data."""

from .config import DataConfig, ExperimentConfig, build_experiment, default_config, parse_config
from .data import (
    ClientDataset,
    GlobalDataset,
    PartitionConfig,
    generate_global,
    long_tailed_counts,
    partition,
)
from .detection import (
    DetectionResult,
    GmmModel,
    IndicatorMatrix,
    build_indicator_matrix,
    detection_metrics,
    fit_gmm,
    impute_missing,
    normalize_columns,
    per_class_losses,
    split_clients,
)
from .errors import ConfigurationError, NumericError, SimulatorError, UsageError
from .evaluation import AblationSpec, bacc, best_and_last, confusion_matrix, evaluate, run_ablation, run_baseline
from .federation import (
    ProtocolConfig,
    RoundRecord,
    daagg,
    fedavg,
    local_train_clean,
    local_train_noisy,
    run_experiment,
)
from .losses import ClassPrior, LossConfig, ce_loss, kd_loss, rampup_lambda, tempered_softmax
from .models import ModelArch, ModelParams, forward, init_params, zero_params
from .noise import NoiseConfig, generate_noise, misclassification_prob, weighted_sample_without_replacement
from .optim import OptimizerState, adam_step, minibatch_train

__all__ = [
    "AblationSpec",
    "ClassPrior",
    "ClientDataset",
    "ConfigurationError",
    "DataConfig",
    "DetectionResult",
    "ExperimentConfig",
    "GlobalDataset",
    "GmmModel",
    "IndicatorMatrix",
    "LossConfig",
    "ModelArch",
    "ModelParams",
    "NoiseConfig",
    "NumericError",
    "OptimizerState",
    "PartitionConfig",
    "ProtocolConfig",
    "RoundRecord",
    "SimulatorError",
    "UsageError",
    "adam_step",
    "bacc",
    "best_and_last",
    "build_experiment",
    "build_indicator_matrix",
    "ce_loss",
    "confusion_matrix",
    "daagg",
    "default_config",
    "detection_metrics",
    "evaluate",
    "fedavg",
    "fit_gmm",
    "forward",
    "generate_global",
    "generate_noise",
    "impute_missing",
    "init_params",
    "kd_loss",
    "local_train_clean",
    "local_train_noisy",
    "long_tailed_counts",
    "minibatch_train",
    "misclassification_prob",
    "normalize_columns",
    "parse_config",
    "partition",
    "per_class_losses",
    "rampup_lambda",
    "run_ablation",
    "run_baseline",
    "run_experiment",
    "split_clients",
    "tempered_softmax",
    "weighted_sample_without_replacement",
    "zero_params",
]
