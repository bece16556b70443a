"""Adversary tools: layer revert, decoding a permute-and-scale protection, fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError, SchemaError, UnrecoverableRowError
from .model import ModelConfig, NamedTensors, canonical, check_weights
from .numkit import RngState, keyed_seed, rng_uniform
from .protect import FFN_KEYS, ProtectedModel
from .training import TrainConfig, accuracy, train

DEFAULT_TAU = 1e-8


@dataclass
class ParamsKeys:
    """Secret keys of the permute-and-scale protection.

    ``perms[i][j]`` is the original hidden unit placed at position ``j`` of
    layer ``i``; ``scales[(i, g)] = (A, B)`` scale the query/key and the
    value/output features of kv group ``g``.
    """

    perms: dict
    scales: dict

    def inverse_perms(self) -> dict:
        return {i: np.argsort(p, kind="stable") for i, p in self.perms.items()}


@dataclass
class AttackReport:
    recovered_fraction: float
    max_scale_error: float
    accuracy: float | None = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"recovered_fraction": self.recovered_fraction,
                "max_scale_error": self.max_scale_error,
                "accuracy": self.accuracy, "details": self.details}


def identity_keys(cfg: ModelConfig) -> ParamsKeys:
    ones = np.ones(cfg.head_dim)
    return ParamsKeys({i: np.arange(cfg.ffn_dim) for i in range(cfg.n_layers)},
                      {(i, g): (ones.copy(), ones.copy())
                       for i in range(cfg.n_layers) for g in range(cfg.n_kv_heads)})


def random_keys(cfg: ModelConfig, seed: int, s_min: float, s_max: float) -> ParamsKeys:
    if not 0 < s_min <= s_max:
        raise ParameterError(f"scale bounds must satisfy 0 < s_min <= s_max, got {s_min}, {s_max}")
    perms, scales = {}, {}
    for i in range(cfg.n_layers):
        u, _ = rng_uniform(RngState(keyed_seed(seed, "perm", i)), cfg.ffn_dim)
        perms[i] = np.argsort(u, kind="stable")
        for g in range(cfg.n_kv_heads):
            u, _ = rng_uniform(RngState(keyed_seed(seed, "scale", i, g)), 2 * cfg.head_dim)
            s = s_min + (s_max - s_min) * u
            scales[(i, g)] = (s[:cfg.head_dim], s[cfg.head_dim:])
    return ParamsKeys(perms, scales)


def _scale_attention(cfg, w, keys: ParamsKeys, inverse: bool):
    hd, size = cfg.head_dim, cfg.group_size
    for (i, g), (a, b) in keys.scales.items():
        if inverse:
            a, b = 1.0 / a, 1.0 / b
        p = f"layer.{i}.attn."
        ks = slice(g * hd, (g + 1) * hd)
        w[p + "wk"][:, ks] /= a
        w[p + "wv"][:, ks] *= b
        for h in range(g * size, (g + 1) * size):
            qs = slice(h * hd, (h + 1) * hd)
            w[p + "wq"][:, qs] *= a
            w[p + "wo"][qs, :] /= b[:, None]


def apply_params_keys(cfg: ModelConfig, w: NamedTensors, keys: ParamsKeys) -> NamedTensors:
    """Function-preserving permutation of FFN units and rescaling of attention features."""
    check_weights(cfg, w)
    out = {k: v.copy() for k, v in w.items()}
    for i, perm in keys.perms.items():
        p = f"layer.{i}.ffn."
        out[p + "w1"] = out[p + "w1"][:, perm]
        out[p + "b1"] = out[p + "b1"][perm]
        out[p + "w2"] = out[p + "w2"][perm, :]
    _scale_attention(cfg, out, keys, inverse=False)
    return canonical(out)


def undo_params_keys(cfg: ModelConfig, w: NamedTensors, keys: ParamsKeys) -> NamedTensors:
    check_weights(cfg, w)
    out = {k: v.copy() for k, v in w.items()}
    _scale_attention(cfg, out, keys, inverse=True)
    for i, inv in keys.inverse_perms().items():
        p = f"layer.{i}.ffn."
        out[p + "w1"] = out[p + "w1"][:, inv]
        out[p + "b1"] = out[p + "b1"][inv]
        out[p + "w2"] = out[p + "w2"][inv, :]
    return canonical(out)


def params_transform(cfg: ModelConfig, w: NamedTensors, seed: int, s_min: float = 0.5,
                     s_max: float = 2.0):
    keys = random_keys(cfg, seed, s_min, s_max)
    return apply_params_keys(cfg, w, keys), keys


def recover_permutation(w1_protected, w1_base, axis: int = 1) -> np.ndarray:
    """Greedy nearest neighbour: ``perm[i] = argmin_j ||W'[i] - W[j]||`` along ``axis``.

    ``axis=1`` matches columns, the hidden-unit axis of ``x @ w1``. Ties go
    to the lowest index.
    """
    a = np.asarray(w1_protected, dtype=np.float64)
    b = np.asarray(w1_base, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"recover_permutation needs equal 2-D shapes, got {a.shape} and {b.shape}")
    if axis == 1:
        a, b = a.T, b.T
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def _median_ratio(prot, base, tau, where):
    """Per-column median of prot / base over entries with |base| > tau."""
    ok = np.abs(base) > tau
    bad = np.flatnonzero(~ok.any(axis=0))
    if bad.size:
        raise UnrecoverableRowError(
            f"no entry above tau={tau} for feature(s) {bad.tolist()} at {where}",
            rows=[(*where, int(r)) for r in bad])
    ratio = np.where(ok, prot / np.where(ok, base, 1.0), np.nan)
    return np.nanmedian(ratio, axis=0)


def recover_scaling(cfg: ModelConfig, w_protected: NamedTensors, w_base: NamedTensors,
                    tau: float = DEFAULT_TAU) -> dict:
    """``(layer, group) -> (A_hat, B_hat)`` from median elementwise ratios against the base."""
    if tau < 0:
        raise ParameterError(f"tau must be >= 0, got {tau}")
    hd, size = cfg.head_dim, cfg.group_size
    out = {}
    for i in range(cfg.n_layers):
        p = f"layer.{i}.attn."
        for k in ("wq", "wv"):
            if np.shape(w_protected[p + k]) != np.shape(w_base[p + k]):
                raise DimensionError(f"{p + k}: shapes differ")
        for g in range(cfg.n_kv_heads):
            heads = range(g * size, (g + 1) * size)
            qp = np.vstack([w_protected[p + "wq"][:, h * hd:(h + 1) * hd] for h in heads])
            qb = np.vstack([w_base[p + "wq"][:, h * hd:(h + 1) * hd] for h in heads])
            ks = slice(g * hd, (g + 1) * hd)
            a = _median_ratio(qp, qb, tau, (i, g))
            b = _median_ratio(w_protected[p + "wv"][:, ks], w_base[p + "wv"][:, ks], tau, (i, g))
            out[(i, g)] = (a, b)
    return out


def decode_params(cfg: ModelConfig, w_protected: NamedTensors, w_base: NamedTensors,
                  tau: float = DEFAULT_TAU):
    """Recover keys against the base and undo them; returns ``(decoded, keys)``."""
    check_weights(cfg, w_protected)
    check_weights(cfg, w_base)
    perms = {i: recover_permutation(w_protected[f"layer.{i}.ffn.w1"], w_base[f"layer.{i}.ffn.w1"])
             for i in range(cfg.n_layers)}
    keys = ParamsKeys(perms, recover_scaling(cfg, w_protected, w_base, tau))
    return undo_params_keys(cfg, w_protected, keys), keys


def compare_keys(true: ParamsKeys, found: ParamsKeys) -> AttackReport:
    hits = sum(int(np.sum(true.perms[i] == found.perms[i])) for i in true.perms)
    total = sum(len(p) for p in true.perms.values())
    err = max((float(np.max(np.abs(np.concatenate(true.scales[k]) - np.concatenate(found.scales[k]))))
               for k in true.scales), default=0.0)
    return AttackReport(hits / total, err)


def revert_modified_layers(bundle, w_base: NamedTensors, parts=("attention", "ffn")) -> NamedTensors:
    """Replace every layer the bundle marks as modified with the base model's tensors.

    ``parts`` selects which kinds of modification are reverted; reverting only
    ``"ffn"`` is the minimum needed to bring a protected bundle back to the
    standard schema. A plain tensor dict (nothing marked) is returned as is.
    """
    if not isinstance(bundle, ProtectedModel):
        return dict(bundle)
    cfg = bundle.cfg
    check_weights(cfg, w_base)
    out = dict(bundle.tensors)
    if "attention" in parts:
        for i in bundle.projected_layers:
            for k in ("wq", "wk"):
                out[f"layer.{i}.attn.{k}"] = w_base[f"layer.{i}.attn.{k}"].copy()
    if "ffn" in parts:
        for i in bundle.taylor_layers:
            for k in [k for k in out if k.startswith(f"layer.{i}.tffn.")]:
                del out[k]
            for k in FFN_KEYS:
                out[f"layer.{i}.ffn.{k}"] = w_base[f"layer.{i}.ffn.{k}"].copy()
    out = canonical(out)
    if not any(".tffn." in k for k in out):
        try:
            check_weights(cfg, out)
        except SchemaError as e:
            raise SchemaError(f"reverted model does not match the base schema: {e}") from e
    return out


def finetune_attack(cfg: ModelConfig, w_merged: NamedTensors, task, budget: TrainConfig,
                    data=None, eval_every: int = 50, n_eval: int = 512):
    """Resume training from a merged model; returns ``(weights, [(step, accuracy), ...])``."""
    curve = []

    def record(step, w):
        if step % eval_every == 0 or step == budget.steps:
            if not curve or curve[-1][0] != step:
                curve.append((step, accuracy(cfg, w, task, n_eval)))

    w, _ = train(cfg, w_merged, task, budget, data=data, callback=record)
    return w, curve
