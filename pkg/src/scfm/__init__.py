"""Shortcut distillation of 2-D flow-matching models."""

from .checkpoint import LoadedModel, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, parse_config
from .data import DatasetSpec, few_shot_subset, sample
from .distill import DistillConfig, Evaluator, SCFMDistiller
from .flow import FlowMatchingTeacher
from .metrics import consistency_residual, sliced_wasserstein, straightness
from .shortcut import ShortcutModel

__all__ = [
    "ConfigError", "DatasetSpec", "DistillConfig", "Evaluator", "ExperimentConfig",
    "FlowMatchingTeacher", "LoadedModel", "SCFMDistiller", "ShortcutModel", "consistency_residual",
    "few_shot_subset", "load_checkpoint", "parse_config", "sample", "save_checkpoint",
    "sliced_wasserstein", "straightness",
]

__version__ = "0.1.0"
