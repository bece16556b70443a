"""Merge-resistant reparameterisation of a trained model.

Attention: every key/value group ``g`` gets a symmetric orthogonal block
``P_g = U diag(s) U^T`` where ``U`` diagonalises

    S_g = sum_{h in g} Wq_h^T Wq_h + Wk_g^T Wk_g

and ``s`` is -1 on the ``ceil(rho * head_dim)`` largest eigen-directions and
+1 elsewhere. Right-multiplying the query slices of the group and the key
slice by ``P_g`` leaves every score ``q_h . k_g`` unchanged (``P P^T = I``)
while pushing the weights as far from their original position as the flip
budget allows: ``||Wq(P-I)||^2 + ||Wk(P-I)||^2 = 4 * (sum of flipped eigenvalues)``.

FFN: the second linear layer is replaced by per-order coefficient matrices

    coef_n[j, :] = w2[j, :] * Act^(n)(z0_j + b1_j) / n!

so that ``y = c + sum_n ((z - z0) ** n) @ coef_n`` with ``z = x @ w1``.
``z0`` is the coordinatewise midpoint of the first-layer outputs seen on
calibration data; ``w2`` itself is not shipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .activations import MAX_ORDER, ActivationKind, act_eval, taylor_scales
from .errors import BundleError, CalibrationError, DimensionError, ParameterError
from .model import ModelConfig, NamedTensors, canonical, check_weights, forward, taylor_order
from .numkit import RngState, jacobi_eigh, keyed_seed, symmetric_top_eigh
from .tasks import gen_task

RSVD_MIN_HEAD_DIM = 48
RSVD_AUTO_RANK = 32
FFN_KEYS = ("w1", "b1", "w2", "c")


@dataclass(frozen=True)
class ProtectConfig:
    flip_fraction: float = 0.5
    taylor_order: int = 8
    rsvd_rank: int | str = "auto"
    rsvd_enabled: bool = True
    calibration_samples: int = 512
    seed: int = 0
    protect_attention: bool = True
    protect_ffn: bool = True

    def __post_init__(self):
        if not 0.0 <= self.flip_fraction <= 1.0:
            raise ParameterError(f"flip_fraction must lie in [0, 1], got {self.flip_fraction}")
        if not 0 <= self.taylor_order <= MAX_ORDER:
            raise ParameterError(f"taylor_order must lie in [0, {MAX_ORDER}], got {self.taylor_order}")
        if self.calibration_samples < 1:
            raise ParameterError(f"calibration_samples must be >= 1, got {self.calibration_samples}")
        if self.rsvd_rank != "auto" and int(self.rsvd_rank) < 1:
            raise ParameterError(f"rsvd_rank must be 'auto' or >= 1, got {self.rsvd_rank}")

    def flips(self, head_dim: int) -> int:
        return min(head_dim, math.ceil(self.flip_fraction * head_dim - 1e-9))

    def to_dict(self) -> dict:
        return {
            "flip_fraction": self.flip_fraction, "taylor_order": self.taylor_order,
            "rsvd_rank": self.rsvd_rank, "rsvd_enabled": self.rsvd_enabled,
            "calibration_samples": self.calibration_samples, "seed": self.seed,
            "protect_attention": self.protect_attention, "protect_ffn": self.protect_ffn,
        }


# ---------------------------------------------------------------------------
# attention projection
# ---------------------------------------------------------------------------

@dataclass
class ProjectionPlan:
    head_dim: int
    n_heads: int
    n_kv_heads: int
    blocks: dict  # (layer, group) -> head_dim x head_dim
    eigenvalues: dict = field(default_factory=dict)  # (layer, group) -> spectrum of S_g

    @property
    def layers(self) -> list:
        return sorted({l for l, _ in self.blocks})

    def heads_of(self, group: int) -> list:
        size = self.n_heads // self.n_kv_heads
        return list(range(group * size, (group + 1) * size))

    def query_matrix(self, layer: int) -> np.ndarray:
        """Block-diagonal matrix acting on all query columns of ``layer``."""
        hd = self.head_dim
        out = np.zeros((self.n_heads * hd, self.n_heads * hd))
        for h in range(self.n_heads):
            g = h // (self.n_heads // self.n_kv_heads)
            out[h * hd:(h + 1) * hd, h * hd:(h + 1) * hd] = self.blocks[(layer, g)]
        return out

    def key_matrix(self, layer: int) -> np.ndarray:
        hd = self.head_dim
        out = np.zeros((self.n_kv_heads * hd, self.n_kv_heads * hd))
        for g in range(self.n_kv_heads):
            out[g * hd:(g + 1) * hd, g * hd:(g + 1) * hd] = self.blocks[(layer, g)]
        return out


def head_slices(cfg: ModelConfig, w: NamedTensors, layer: int, group: int):
    """Query slices of every head in ``group`` and the group's key slice."""
    hd, size = cfg.head_dim, cfg.group_size
    wq = w[f"layer.{layer}.attn.wq"]
    wk = w[f"layer.{layer}.attn.wk"]
    qs = [wq[:, h * hd:(h + 1) * hd] for h in range(group * size, (group + 1) * size)]
    return qs, wk[:, group * hd:(group + 1) * hd]


def gram(qs, wk) -> np.ndarray:
    return sum(q.T @ q for q in qs) + wk.T @ wk


def sign_projection(vectors: np.ndarray, flips: int) -> np.ndarray:
    """``U diag(s) U^T`` with s = -1 on the first ``flips`` columns of ``U``."""
    d = vectors.shape[0]
    if flips == 0:
        return np.eye(d)
    if flips == d:
        return -np.eye(d)
    signs = np.ones(vectors.shape[1])
    signs[:flips] = -1.0
    p = (vectors * signs) @ vectors.T
    return 0.5 * (p + p.T)


def displacement(qs, wk, p) -> float:
    """sum_h ||Wq_h (P - I)||_F^2 + ||Wk (P - I)||_F^2."""
    d = p - np.eye(p.shape[0])
    return float(sum(np.sum((q @ d) ** 2) for q in qs) + np.sum((wk @ d) ** 2))


def merge_gap(wq, wk, p) -> float:
    """||(1/4)(Wq P + Wq)(Wk P + Wk)^T - Wq Wk^T||_F, the averaged-merge displacement."""
    merged = 0.25 * (wq @ p + wq) @ (wk @ p + wk).T
    return float(np.linalg.norm(merged - wq @ wk.T))


def _eig(s, pc: ProtectConfig, layer, group):
    hd = s.shape[0]
    if pc.rsvd_enabled and hd > RSVD_MIN_HEAD_DIM:
        rank = min(hd, RSVD_AUTO_RANK) if pc.rsvd_rank == "auto" else min(hd, int(pc.rsvd_rank))
        rng = RngState(keyed_seed(pc.seed, "rsvd", layer, group))
        return symmetric_top_eigh(s, rank, rng=rng)
    return jacobi_eigh(s)


def build_projection(cfg: ModelConfig, w: NamedTensors, pc: ProtectConfig) -> ProjectionPlan:
    check_weights(cfg, w)
    flips = pc.flips(cfg.head_dim)
    blocks, spectra = {}, {}
    for i in range(cfg.n_layers):
        for g in range(cfg.n_kv_heads):
            qs, wk = head_slices(cfg, w, i, g)
            eig = _eig(gram(qs, wk), pc, i, g)
            blocks[(i, g)] = sign_projection(eig.eigenvectors, flips)
            spectra[(i, g)] = eig.eigenvalues
    return ProjectionPlan(cfg.head_dim, cfg.n_heads, cfg.n_kv_heads, blocks, spectra)


def _check_plan(cfg, plan):
    if (plan.head_dim, plan.n_heads, plan.n_kv_heads) != (cfg.head_dim, cfg.n_heads, cfg.n_kv_heads):
        raise DimensionError(
            f"plan built for head_dim={plan.head_dim}, heads={plan.n_heads}/{plan.n_kv_heads}; "
            f"config has head_dim={cfg.head_dim}, heads={cfg.n_heads}/{cfg.n_kv_heads}"
        )
    for (i, g), b in plan.blocks.items():
        if not (0 <= i < cfg.n_layers and 0 <= g < cfg.n_kv_heads) or b.shape != (cfg.head_dim,) * 2:
            raise DimensionError(f"plan block ({i}, {g}) of shape {b.shape} does not fit the config")


def apply_projection(cfg: ModelConfig, w: NamedTensors, plan: ProjectionPlan) -> NamedTensors:
    _check_plan(cfg, plan)
    out = dict(w)
    hd = cfg.head_dim
    for i in plan.layers:
        wq = w[f"layer.{i}.attn.wq"].copy()
        wk = w[f"layer.{i}.attn.wk"].copy()
        for g in range(cfg.n_kv_heads):
            p = plan.blocks.get((i, g))
            if p is None:
                continue
            for h in plan.heads_of(g):
                wq[:, h * hd:(h + 1) * hd] = wq[:, h * hd:(h + 1) * hd] @ p
            wk[:, g * hd:(g + 1) * hd] = wk[:, g * hd:(g + 1) * hd] @ p
        out[f"layer.{i}.attn.wq"] = wq
        out[f"layer.{i}.attn.wk"] = wk
    return out


# ---------------------------------------------------------------------------
# FFN reparameterisation
# ---------------------------------------------------------------------------

@dataclass
class CalibrationStats:
    z_min: list
    z_max: list
    sample_count: int

    @property
    def z0(self) -> list:
        return [0.5 * (lo + hi) for lo, hi in zip(self.z_min, self.z_max)]

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        return CalibrationStats(
            [np.minimum(a, b) for a, b in zip(self.z_min, other.z_min)],
            [np.maximum(a, b) for a, b in zip(self.z_max, other.z_max)],
            self.sample_count + other.sample_count,
        )


def calibrate_batch(cfg: ModelConfig, w: NamedTensors, batch) -> CalibrationStats:
    """Coordinatewise min / max of the first FFN layer output ``z`` per layer."""
    if len(batch) == 0:
        raise CalibrationError("calibration set is empty")
    _, cache = forward(cfg, w, batch, keep_cache=True)
    zs = [c["z"].reshape(-1, cfg.ffn_dim) for c in cache["layers"]]
    return CalibrationStats([z.min(axis=0) for z in zs], [z.max(axis=0) for z in zs], len(batch))


def calibrate_z0(cfg: ModelConfig, w: NamedTensors, task, pc: ProtectConfig, chunk: int = 256) -> CalibrationStats:
    if pc.calibration_samples < 1:
        raise CalibrationError("calibration_samples must be >= 1")
    tasks = list(task) if isinstance(task, (list, tuple)) else [task]
    stats = None
    for t in tasks:
        data = gen_task(t, pc.calibration_samples, stream="calibration")
        for start in range(0, len(data), chunk):
            s = calibrate_batch(cfg, w, data.take(slice(start, start + chunk)))
            stats = s if stats is None else stats.merge(s)
    return stats


@dataclass
class TaylorFfn:
    w1: np.ndarray
    b1: np.ndarray
    z0: np.ndarray
    coeffs: list
    c: np.ndarray
    activation: ActivationKind

    @property
    def order(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, x):
        u = x @ self.w1 - self.z0
        y = np.broadcast_to(self.c, u.shape[:-1] + self.c.shape).copy()
        un = np.ones_like(u)
        for n, coef in enumerate(self.coeffs):
            if n:
                un = un * u
            y += un @ coef
        return y


def reparameterize_ffn(cfg: ModelConfig, w: NamedTensors, stats: CalibrationStats, pc: ProtectConfig) -> dict:
    """Layer index -> :class:`TaylorFfn`."""
    out = {}
    for i, z0 in enumerate(stats.z0):
        p = f"layer.{i}.ffn."
        b1, w2 = w[p + "b1"], w[p + "w2"]
        scales = taylor_scales(cfg.activation, pc.taylor_order, z0 + b1)  # (N+1, ffn_dim)
        out[i] = TaylorFfn(
            w1=w[p + "w1"].copy(), b1=b1.copy(), z0=np.asarray(z0, dtype=np.float64).copy(),
            coeffs=[w2 * s[:, None] for s in scales], c=w[p + "c"].copy(),
            activation=cfg.activation,
        )
    return out


def original_ffn(cfg: ModelConfig, w: NamedTensors, layer: int, x):
    p = f"layer.{layer}.ffn."
    return act_eval(cfg.activation, x @ w[p + "w1"] + w[p + "b1"]) @ w[p + "w2"] + w[p + "c"]


# ---------------------------------------------------------------------------
# protected bundle
# ---------------------------------------------------------------------------

@dataclass
class ProtectedModel:
    """Protected weights plus a manifest of which layers were modified.

    ``tensors`` holds the ordinary tensors of untouched parts, the projected
    attention weights, and ``layer.{i}.tffn.{w1,b1,z0,c,coef0..coefN}`` for
    every reparameterised FFN.
    """

    cfg: ModelConfig
    tensors: NamedTensors
    manifest: dict

    @property
    def projected_layers(self) -> list:
        return list(self.manifest.get("projected_layers", []))

    @property
    def taylor_layers(self) -> list:
        return list(self.manifest.get("taylor_layers", []))


def build_bundle(cfg: ModelConfig, w: NamedTensors, plan: ProjectionPlan | None, taylor: dict | None,
                 pc: ProtectConfig | None = None) -> ProtectedModel:
    t = apply_projection(cfg, w, plan) if plan is not None else dict(w)
    taylor = taylor or {}
    for i, tf in taylor.items():
        for k in FFN_KEYS:
            del t[f"layer.{i}.ffn.{k}"]
        p = f"layer.{i}.tffn."
        t[p + "w1"], t[p + "b1"], t[p + "z0"], t[p + "c"] = tf.w1, tf.b1, tf.z0, tf.c
        for n, coef in enumerate(tf.coeffs):
            t[p + f"coef{n}"] = coef
    manifest = {
        "projected_layers": plan.layers if plan is not None else [],
        "taylor_layers": sorted(taylor),
        "taylor_order": next(iter(taylor.values())).order if taylor else None,
        "protect_config": pc.to_dict() if pc is not None else None,
    }
    return ProtectedModel(cfg, canonical(t), manifest)


def protect(cfg: ModelConfig, w: NamedTensors, task, pc: ProtectConfig) -> ProtectedModel:
    """Full pipeline: projection plan, calibration, Taylor FFN, bundle."""
    check_weights(cfg, w)
    plan = build_projection(cfg, w, pc) if pc.protect_attention else None
    taylor = None
    if pc.protect_ffn:
        stats = calibrate_z0(cfg, w, task, pc)
        taylor = reparameterize_ffn(cfg, w, stats, pc)
    return build_bundle(cfg, w, plan, taylor, pc)


def check_bundle(bundle: ProtectedModel) -> None:
    cfg, t = bundle.cfg, bundle.tensors
    for i in bundle.taylor_layers:
        p = f"layer.{i}.tffn."
        n = taylor_order(t, i)
        if n < 0:
            raise BundleError(f"layer {i} is marked Taylor-protected but has no coefficients")
        if bundle.manifest.get("taylor_order") not in (None, n):
            raise BundleError(f"layer {i} has order {n}, manifest says {bundle.manifest['taylor_order']}")
        want = {"w1": (cfg.dim, cfg.ffn_dim), "b1": (cfg.ffn_dim,), "z0": (cfg.ffn_dim,), "c": (cfg.dim,)}
        want.update({f"coef{k}": (cfg.ffn_dim, cfg.dim) for k in range(n + 1)})
        for k, s in want.items():
            if p + k not in t or np.shape(t[p + k]) != s:
                raise BundleError(f"{p + k}: expected shape {s}, got {np.shape(t.get(p + k))}")
        if any(f"layer.{i}.ffn.{k}" in t for k in FFN_KEYS):
            raise BundleError(f"layer {i} carries both original and Taylor FFN tensors")


def protected_forward(cfg: ModelConfig, bundle: ProtectedModel, batch):
    check_bundle(bundle)
    logits, _ = forward(cfg, bundle.tensors, batch)
    return logits


def layer_taylor(bundle: ProtectedModel, i: int) -> TaylorFfn:
    t, p = bundle.tensors, f"layer.{i}.tffn."
    n = taylor_order(t, i)
    return TaylorFfn(t[p + "w1"], t[p + "b1"], t[p + "z0"], [t[p + f"coef{k}"] for k in range(n + 1)],
                     t[p + "c"], bundle.cfg.activation)


def remainder_stats(cfg: ModelConfig, w: NamedTensors, bundle: ProtectedModel, task, n: int = 512) -> dict:
    """Per Taylor layer: mean / std / max of |original FFN - Taylor FFN|.

    Both FFNs see the same inputs, the original model's FFN inputs on ``n``
    held-out samples of ``task`` (or on a given :class:`Batch`).
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    batch = task if hasattr(task, "tokens") else gen_task(task, n, stream="eval")
    _, cache = forward(cfg, w, batch, keep_cache=True)
    report = {}
    for i in bundle.taylor_layers:
        x = cache["layers"][i]["f_in"]
        r = np.abs(original_ffn(cfg, w, i, x) - layer_taylor(bundle, i)(x))
        report[i] = {"mean": float(r.mean()), "std": float(r.std()), "max": float(r.max())}
    return report
