"""Cross-spectral patch matching: combined descriptor/metric networks with
hard-negative mining and feature-guided training."""

__version__ = "0.1.0"

from .data import (
    PatchPack,
    SynthConfig,
    convert_external,
    generate_synthetic,
    load_patch_pack,
    save_patch_pack,
    training_batches,
)
from .evaluator import EvalReport, ScoredPairs, evaluate, fpr95, score_pairs
from .losses import LossBreakdown, LossWeights, descriptor_loss, feature_guided_loss, metric_loss, total_loss
from .mining import assemble_metric_batch, distance_matrix, hard_negative_indices
from .network import (
    ArchitectureConfig,
    KglNet,
    PRESET_NAMES,
    build_metric_only,
    build_network,
    count_parameters,
    descriptor_distance,
    get_preset,
    metric_branch_forward,
    shared_parameter_report,
)
from .trainer import TrainConfig, train, train_step

__all__ = [
    "ArchitectureConfig",
    "EvalReport",
    "KglNet",
    "LossBreakdown",
    "LossWeights",
    "PRESET_NAMES",
    "PatchPack",
    "ScoredPairs",
    "SynthConfig",
    "TrainConfig",
    "assemble_metric_batch",
    "build_metric_only",
    "build_network",
    "convert_external",
    "count_parameters",
    "descriptor_distance",
    "descriptor_loss",
    "distance_matrix",
    "evaluate",
    "feature_guided_loss",
    "fpr95",
    "generate_synthetic",
    "get_preset",
    "hard_negative_indices",
    "load_patch_pack",
    "metric_branch_forward",
    "metric_loss",
    "save_patch_pack",
    "score_pairs",
    "shared_parameter_report",
    "total_loss",
    "train",
    "train_step",
    "training_batches",
]
