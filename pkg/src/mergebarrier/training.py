"""Minibatch training (SGD or Adam) and task accuracy."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, TrainingError
from .model import Batch, ModelConfig, NamedTensors, forward, loss_and_grad
from .numkit import RngState, keyed_seed, rng_uniform
from .tasks import TaskSpec, concat, gen_task

# tensors that parameterise a protected layer but are not trained
FROZEN_SUFFIXES = (".tffn.z0", ".tffn.b1")


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 3e-3
    batch_size: int = 64
    seed: int = 0
    optimizer: Optimizer = Optimizer.ADAM
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decay_only: tuple = ()
    freeze: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "freeze", tuple(self.freeze))
        object.__setattr__(self, "decay_only", tuple(self.decay_only))
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        if not self.lr > 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "lr": self.lr, "batch_size": self.batch_size,
                "seed": self.seed, "optimizer": self.optimizer.value,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "decay_only": list(self.decay_only),
                "freeze": list(self.freeze)}


def _as_tasks(task):
    return list(task) if isinstance(task, (list, tuple)) else [task]


def _draw(tasks, tc, step, data):
    if data is not None:
        u, _ = rng_uniform(RngState(keyed_seed(tc.seed, "subset", step)), tc.batch_size)
        return data.take((u * len(data)).astype(np.int64))
    per = max(1, tc.batch_size // len(tasks))
    return concat(gen_task(t.with_seed(keyed_seed(tc.seed, t.seed)), per, stream=step) for t in tasks)


def train(cfg: ModelConfig, w: NamedTensors, task, tc: TrainConfig, data: Batch | None = None,
          callback=None):
    """Train a copy of ``w``; returns ``(new_weights, per_step_losses)``.

    ``task`` is a :class:`TaskSpec` or a list of them (batches mix tasks in
    equal parts). With ``data`` given, minibatches are resampled from that
    fixed pool instead of freshly generated. ``callback(step, weights)`` is
    invoked before every step and once after the last; a truthy return value
    stops training at that step.
    """
    tasks = _as_tasks(task)
    w = {k: v.copy() for k, v in w.items()}
    m = {k: np.zeros_like(v) for k, v in w.items()}
    s = {k: np.zeros_like(v) for k, v in w.items()}
    losses = []
    for step in range(tc.steps):
        if callback is not None and callback(step, w):
            return w, losses
        batch = _draw(tasks, tc, step, data)
        value, g = loss_and_grad(cfg, w, batch)
        if not np.isfinite(value):
            raise TrainingError(f"loss became non-finite at step {step}", step=step)
        losses.append(value)
        t = step + 1
        for k in w:
            if k.endswith(FROZEN_SUFFIXES) or k.startswith(tc.freeze):
                continue
            if tc.weight_decay and w[k].ndim == 2 and (not tc.decay_only or k.endswith(tc.decay_only)):
                # decoupled decay on weight matrices only
                w[k] -= tc.lr * tc.weight_decay * w[k]
            if tc.optimizer is Optimizer.SGD:
                w[k] -= tc.lr * g[k]
            else:
                m[k] = tc.beta1 * m[k] + (1 - tc.beta1) * g[k]
                s[k] = tc.beta2 * s[k] + (1 - tc.beta2) * g[k] * g[k]
                mhat = m[k] / (1 - tc.beta1 ** t)
                shat = s[k] / (1 - tc.beta2 ** t)
                w[k] -= tc.lr * mhat / (np.sqrt(shat) + tc.eps)
    if callback is not None:
        callback(tc.steps, w)
    return w, losses


def predict(cfg: ModelConfig, w: NamedTensors, batch: Batch) -> np.ndarray:
    """Greedy argmax token per position (ties go to the lowest id)."""
    logits, _ = forward(cfg, w, batch)
    return np.argmax(logits, axis=1).reshape(batch.tokens.shape)


def batch_accuracy(cfg: ModelConfig, w: NamedTensors, batch: Batch) -> float:
    pred = predict(cfg, w, batch)
    hit = (pred == batch.targets) & batch.loss_mask
    return float(hit.sum() / batch.loss_mask.sum())


def eval_batch(task: TaskSpec, n: int) -> Batch:
    return gen_task(task, n, stream="eval")


def accuracy(cfg: ModelConfig, w: NamedTensors, task: TaskSpec, n: int = 512) -> float:
    """Exact-match rate over answer positions of ``n`` held-out samples."""
    return batch_accuracy(cfg, w, eval_batch(task, n))
