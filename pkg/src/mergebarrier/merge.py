"""Task Arithmetic, TIES and DARE over named tensors."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, SchemaError
from .model import NamedTensors, canonical
from .numkit import RngState, keyed_seed, rng_uniform


class MergeMethod(str, enum.Enum):
    TASK_ARITHMETIC = "task_arithmetic"
    TIES = "ties"
    DARE_TASK = "dare_task"
    DARE_TIES = "dare_ties"


@dataclass(frozen=True)
class MergeConfig:
    method: MergeMethod = MergeMethod.TASK_ARITHMETIC
    lam: float = 1.0
    trim_keep_fraction: float = 0.2
    drop_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", MergeMethod(self.method))
        if not math.isfinite(self.lam):
            raise ParameterError(f"lambda must be finite, got {self.lam}")
        if not 0.0 < self.trim_keep_fraction <= 1.0:
            raise ParameterError(f"trim keep fraction must lie in (0, 1], got {self.trim_keep_fraction}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ParameterError(f"drop rate must be < 1 (and >= 0), got {self.drop_rate}")

    def to_dict(self) -> dict:
        return {"method": self.method.value, "lambda": self.lam,
                "trim_keep_fraction": self.trim_keep_fraction,
                "drop_rate": self.drop_rate, "seed": self.seed}


@dataclass
class TaskVectorSet:
    base: NamedTensors
    deltas: list

    def __post_init__(self):
        for d in self.deltas:
            _check_schema(self.base, d)
            for k, v in d.items():
                if not np.all(np.isfinite(v)):
                    raise ParameterError(f"task vector entry {k} is not finite")


def _check_schema(a: NamedTensors, b: NamedTensors) -> None:
    extra = sorted(set(b) - set(a))
    missing = sorted(set(a) - set(b))
    shape = sorted(k for k in set(a) & set(b) if np.shape(a[k]) != np.shape(b[k]))
    if extra or missing or shape:
        parts = []
        if extra:
            parts.append("unexpected: " + ", ".join(extra))
        if missing:
            parts.append("missing: " + ", ".join(missing))
        if shape:
            parts.append("shape mismatch: " + ", ".join(shape))
        raise SchemaError("schema mismatch (" + "; ".join(parts) + ")", names=extra + missing + shape)


def task_vector(base: NamedTensors, expert: NamedTensors) -> NamedTensors:
    _check_schema(base, expert)
    return canonical({k: np.asarray(expert[k]) - np.asarray(base[k]) for k in base})


def task_vectors(base: NamedTensors, experts) -> TaskVectorSet:
    return TaskVectorSet(base, [task_vector(base, e) for e in experts])


def _need(tv: TaskVectorSet):
    if not tv.deltas:
        raise ParameterError("need at least one task vector")


def merge_task_arithmetic(tv: TaskVectorSet, mc: MergeConfig) -> NamedTensors:
    _need(tv)
    out = {}
    for k, b in tv.base.items():
        total = tv.deltas[0][k]
        for d in tv.deltas[1:]:
            total = total + d[k]
        out[k] = b + mc.lam * total
    return canonical(out)


def trim(x: np.ndarray, keep: float) -> np.ndarray:
    """Keep the ``ceil(keep * size)`` largest-magnitude entries (ties by lowest index)."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    k = max(1, math.ceil(keep * flat.size - 1e-9))
    if k >= flat.size:
        return x.copy()
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    out[order[:k]] = flat[order[:k]]
    return out.reshape(x.shape)


def ties_combine(values) -> np.ndarray:
    """Elect a sign per coordinate (zero sum elects +) and average agreeing entries."""
    stack = np.stack([np.asarray(v, dtype=np.float64) for v in values])
    elected = np.where(stack.sum(axis=0) >= 0, 1.0, -1.0)
    agree = (stack != 0) & (np.sign(stack) == elected)
    count = agree.sum(axis=0)
    total = np.where(agree, stack, 0.0).sum(axis=0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def ties_merge(tv: TaskVectorSet, mc: MergeConfig) -> NamedTensors:
    _need(tv)
    out = {}
    for k, b in tv.base.items():
        trimmed = [trim(d[k], mc.trim_keep_fraction) for d in tv.deltas]
        out[k] = b + mc.lam * ties_combine(trimmed)
    return canonical(out)


def dare_mask(name: str, shape, mc: MergeConfig, stream: int = 0) -> np.ndarray:
    """Survivor mask for one tensor, keyed by (seed, stream, tensor name)."""
    size = int(np.prod(shape, dtype=np.int64))
    u, _ = rng_uniform(RngState(keyed_seed(mc.seed, "dare", stream, name)), size)
    return (u >= mc.drop_rate).reshape(shape)


def dare_preprocess(delta: NamedTensors, mc: MergeConfig, stream: int = 0) -> NamedTensors:
    """Drop entries with probability p and rescale survivors by 1/(1-p).

    ``stream`` separates the masks of different task vectors merged together.
    """
    if not 0.0 <= mc.drop_rate < 1.0:
        raise ParameterError(f"drop rate must be < 1, got {mc.drop_rate}")
    if mc.drop_rate == 0.0:
        return {k: np.array(v, copy=True) for k, v in delta.items()}
    scale = 1.0 / (1.0 - mc.drop_rate)
    return canonical({k: np.where(dare_mask(k, np.shape(v), mc, stream), v * scale, 0.0)
                      for k, v in delta.items()})


def merge(tv: TaskVectorSet, mc: MergeConfig) -> NamedTensors:
    if mc.method in (MergeMethod.DARE_TASK, MergeMethod.DARE_TIES):
        tv = TaskVectorSet(tv.base, [dare_preprocess(d, mc, i) for i, d in enumerate(tv.deltas)])
    if mc.method in (MergeMethod.TIES, MergeMethod.DARE_TIES):
        return ties_merge(tv, mc)
    return merge_task_arithmetic(tv, mc)


def merge_models(base: NamedTensors, experts, mc: MergeConfig) -> NamedTensors:
    return merge(task_vectors(base, experts), mc)


def merge_report(tv: TaskVectorSet, mc: MergeConfig) -> dict:
    """Hyperparameters plus per-tensor sparsity of each preprocessed task vector."""
    sparsity = {}
    for k in tv.base:
        fractions = []
        for i, d in enumerate(tv.deltas):
            v = d[k]
            if mc.method in (MergeMethod.DARE_TASK, MergeMethod.DARE_TIES):
                v = dare_preprocess({k: v}, mc, i)[k]
            if mc.method in (MergeMethod.TIES, MergeMethod.DARE_TIES):
                v = trim(v, mc.trim_keep_fraction)
            fractions.append(float(np.mean(v == 0)))
        sparsity[k] = fractions
    return {"config": mc.to_dict(), "n_task_vectors": len(tv.deltas), "sparsity": sparsity}
