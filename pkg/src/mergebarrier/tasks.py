"""Synthetic sequence tasks.

Data symbols are token ids ``0 .. vocab - 7``; the top six ids are markers::

    PAD = vocab-1, SEP = vocab-2, EQ = vocab-3, ADD = vocab-4, COPY = vocab-5, REV = vocab-6

Layouts (a sequence of ``seq_len + 1`` ids, inputs are ``seq[:-1]`` and
targets ``seq[1:]``)::

    MOD_ADD   ADD a b EQ (a+b+k mod m) PAD ...
    COPY      COPY x1 .. xL SEP y1 .. yL PAD ...
    REVERSE   REV  x1 .. xL SEP yL .. y1 PAD ...

with ``y = (x + k) mod n_symbols`` and ``k`` the task offset (normally 0;
a shifted variant gives a base model related but wrong knowledge). ``marker``
replaces the leading task token, e.g. with an unused data id, so the same
skill can be taught under a different prompt.

Only answer positions are unmasked.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .model import Batch
from .numkit import RngState, keyed_seed, rng_uniform

N_SPECIAL = 6


class TaskKind(str, enum.Enum):
    MOD_ADD = "mod_add"
    COPY = "copy"
    REVERSE = "reverse"


def specials(vocab: int) -> dict:
    return {"PAD": vocab - 1, "SEP": vocab - 2, "EQ": vocab - 3,
            "ADD": vocab - 4, "COPY": vocab - 5, "REV": vocab - 6}


@dataclass(frozen=True)
class TaskSpec:
    task: TaskKind = TaskKind.MOD_ADD
    vocab: int = 24
    seq_len: int = 10
    modulus: int = 13
    span: int = 4
    n_symbols: int = 10
    offset: int = 0
    marker: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "task", TaskKind(self.task))
        n_data = self.vocab - N_SPECIAL
        if self.marker is not None and not 0 <= self.marker < self.vocab:
            raise ConfigError(f"marker {self.marker} must lie in [0, {self.vocab})")
        if self.task is TaskKind.MOD_ADD:
            if not 2 <= self.modulus <= n_data:
                raise ConfigError(f"modulus {self.modulus} must lie in [2, {n_data}] for vocab {self.vocab}")
            if self.seq_len + 1 < 5:
                raise ConfigError(f"MOD_ADD needs seq_len >= 4, got {self.seq_len}")
        else:
            if not 1 <= self.n_symbols <= n_data:
                raise ConfigError(f"n_symbols {self.n_symbols} must lie in [1, {n_data}] for vocab {self.vocab}")
            if self.span < 1 or 2 * self.span + 2 > self.seq_len + 1:
                raise ConfigError(f"span {self.span} does not fit seq_len {self.seq_len}")

    @property
    def n_answers(self) -> int:
        """Number of distinct answer symbols; 1/n_answers is the chance accuracy."""
        return self.modulus if self.task is TaskKind.MOD_ADD else self.n_symbols

    @property
    def chance(self) -> float:
        return 1.0 / self.n_answers

    def with_seed(self, seed: int) -> "TaskSpec":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {"task": self.task.value, "vocab": self.vocab, "seq_len": self.seq_len,
                "modulus": self.modulus, "span": self.span, "n_symbols": self.n_symbols,
                "offset": self.offset, "marker": self.marker, "seed": self.seed}


def _ints(rng, n, high):
    u, rng = rng_uniform(rng, n)
    return np.minimum((u * high).astype(np.int64), high - 1), rng


def _lead(task: TaskSpec, sp: dict) -> int:
    if task.marker is not None:
        return task.marker
    return sp[{TaskKind.MOD_ADD: "ADD", TaskKind.COPY: "COPY", TaskKind.REVERSE: "REV"}[task.task]]


def gen_task(task: TaskSpec, n: int, stream="train") -> Batch:
    """``n`` samples of ``task``; identical for identical ``(task.seed, stream)``."""
    if n < 1:
        raise ConfigError(f"need at least one sample, got {n}")
    sp = specials(task.vocab)
    L = task.seq_len + 1
    seq = np.full((n, L), sp["PAD"], dtype=np.int64)
    mask = np.zeros((n, task.seq_len), dtype=bool)
    rng = RngState(keyed_seed(task.seed, task.task.value, stream))
    lead = _lead(task, sp)
    if task.task is TaskKind.MOD_ADD:
        ab, rng = _ints(rng, 2 * n, task.modulus)
        a, b = ab[0::2], ab[1::2]
        seq[:, 0] = lead
        seq[:, 1] = a
        seq[:, 2] = b
        seq[:, 3] = sp["EQ"]
        seq[:, 4] = (a + b + task.offset) % task.modulus
        mask[:, 3] = True
    else:
        S = task.span
        xs, rng = _ints(rng, n * S, task.n_symbols)
        xs = xs.reshape(n, S)
        seq[:, 0] = lead
        seq[:, 1:S + 1] = xs
        seq[:, S + 1] = sp["SEP"]
        ys = (xs + task.offset) % task.n_symbols
        seq[:, S + 2:2 * S + 2] = ys if task.task is TaskKind.COPY else ys[:, ::-1]
        mask[:, S + 1:2 * S + 1] = True
    return Batch(seq[:, :-1], seq[:, 1:], mask)


def mod_add_batch(task: TaskSpec, pairs) -> Batch:
    """Batch for explicit ``(a, b)`` operand pairs."""
    sp = specials(task.vocab)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n = len(pairs)
    seq = np.full((n, task.seq_len + 1), sp["PAD"], dtype=np.int64)
    seq[:, 0], seq[:, 1], seq[:, 2], seq[:, 3] = _lead(task, sp), pairs[:, 0], pairs[:, 1], sp["EQ"]
    seq[:, 4] = (pairs.sum(axis=1) + task.offset) % task.modulus
    mask = np.zeros((n, task.seq_len), dtype=bool)
    mask[:, 3] = True
    return Batch(seq[:, :-1], seq[:, 1:], mask)


def concat(batches) -> Batch:
    batches = list(batches)
    return Batch(np.concatenate([b.tokens for b in batches]),
                 np.concatenate([b.targets for b in batches]),
                 np.concatenate([b.loss_mask for b in batches]))
