"""Input validation shared by the estimators and the CLI."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ParameterError, SchemaError
from .model import ModelConfig, NamedTensors, check_weights
from .protect import ProtectedModel, check_bundle
from .tasks import TaskKind, TaskSpec


def check_fraction(value, name: str, low_open: bool = False, high_open: bool = False) -> float:
    v = float(value)
    lo_ok = v > 0 if low_open else v >= 0
    hi_ok = v < 1 if high_open else v <= 1
    if not (math.isfinite(v) and lo_ok and hi_ok):
        lo = "(" if low_open else "["
        hi = ")" if high_open else "]"
        raise ParameterError(f"{name} must lie in {lo}0, 1{hi}, got {value}")
    return v


def check_positive(value, name: str, strict: bool = True) -> float:
    v = float(value)
    if not math.isfinite(v) or (v <= 0 if strict else v < 0):
        raise ParameterError(f"{name} must be {'>' if strict else '>='} 0, got {value}")
    return v


def check_count(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ParameterError(f"{name} must be an integer >= {minimum}, got {value}")
    return int(value)


def check_model(cfg: ModelConfig, w) -> NamedTensors:
    """Validate a plain model and return it; protected bundles are rejected."""
    if isinstance(w, ProtectedModel):
        raise SchemaError("expected a plain model, got a protected bundle")
    if not isinstance(w, dict):
        raise SchemaError(f"expected a mapping of named tensors, got {type(w).__name__}")
    for k, v in w.items():
        if not np.all(np.isfinite(v)):
            raise SchemaError(f"tensor {k} contains non-finite values")
    check_weights(cfg, w)
    return w


def check_model_or_bundle(cfg: ModelConfig, w):
    if isinstance(w, ProtectedModel):
        if w.cfg != cfg:
            raise SchemaError("bundle was built for a different model config")
        check_bundle(w)
        return w
    return check_model(cfg, w)


def as_task(task) -> TaskSpec:
    """Accept a :class:`TaskSpec`, a :class:`TaskKind` or its name."""
    if isinstance(task, TaskSpec):
        return task
    try:
        return TaskSpec(TaskKind(task))
    except ValueError as e:
        names = ", ".join(k.value for k in TaskKind)
        raise ConfigError(f"unknown task {task!r}; expected one of {names}") from e
