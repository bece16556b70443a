"""Merge-resistant reparameterization of transformer experts, with the merging,
attack and evaluation tooling needed to test it on toy models."""

from .attack import decode_params, finetune_attack, params_transform, revert_modified_layers
from .errors import (BundleError, CalibrationError, ConfigError, ConvergenceError, CorruptionError,
                     DegenerateError, DimensionError, FormatError, MergeBarrierError, ParameterError,
                     SchemaError, StagingError, TrainingError)
from .estimators import MergeBarrier, ModelMerger, ParamsDecoder
from .evaluation import SharpnessConfig, barrier_height, interpolation_curve, loss_landscape, sharpness
from .merge import MergeConfig, MergeMethod, merge_models, task_vectors
from .model import Batch, ModelConfig, forward, init_model
from .protect import ProtectConfig, ProtectedModel, apply_projection, build_projection, protect, protected_forward
from .scenario import ScenarioSpec, scenario_run
from .tasks import TaskKind, TaskSpec, gen_task
from .training import TrainConfig, accuracy, train

__version__ = "0.1.0"

__all__ = [
    "Batch", "BundleError", "CalibrationError", "ConfigError", "ConvergenceError", "CorruptionError",
    "DegenerateError", "DimensionError", "FormatError", "MergeBarrier", "MergeBarrierError", "MergeConfig",
    "MergeMethod", "ModelConfig", "ModelMerger", "ParameterError", "ParamsDecoder", "ProtectConfig",
    "ProtectedModel", "ScenarioSpec", "SchemaError", "SharpnessConfig", "StagingError", "TaskKind", "TaskSpec",
    "TrainConfig", "TrainingError", "accuracy", "apply_projection", "barrier_height", "build_projection",
    "decode_params", "finetune_attack", "forward", "gen_task", "init_model", "interpolation_curve",
    "loss_landscape", "merge_models", "params_transform", "protect", "protected_forward", "revert_modified_layers",
    "scenario_run", "sharpness", "task_vectors", "train",
]
