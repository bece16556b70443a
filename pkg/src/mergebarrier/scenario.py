"""End-to-end desk-scale scenario: train, protect, merge, attack, explain.

The base model is pretrained on prompts that look like the expert tasks but
answer them wrongly: ``ADD a b EQ`` yields ``a + b + 5`` and the COPY marker
triggers reversal. The correct behaviour is also taught, behind spare data
ids used as prompt markers. Expert A then learns modular addition on the
real prompt by tuning only FFN matrices; expert B learns COPY by tuning only
query projections. Both experts stop as soon as they reach the target
accuracy, so their task vectors stay small and merge well when unprotected.

Every random choice derives from ``ScenarioSpec.seed``; the JSON report
carries no wall-clock data, which goes to a sidecar log instead.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import weights_io
from .attack import finetune_attack, revert_modified_layers
from .errors import ConfigError, StagingError
from .evaluation import (SharpnessConfig, barrier_height, interpolation_curve, loss_landscape,
                         sharpness, write_curve_csv, write_grid_csv)
from .merge import MergeConfig, MergeMethod, merge_models
from .model import ModelConfig, NamedTensors, check_weights, init_model
from .numkit import keyed_seed
from .protect import (ProtectConfig, apply_projection, build_bundle, build_projection, calibrate_z0,
                      remainder_stats, reparameterize_ffn)
from .tasks import N_SPECIAL, TaskKind, TaskSpec, gen_task, specials
from .training import TrainConfig, accuracy, batch_accuracy, train

REPORT_NAME = "report.json"
LOG_NAME = "run.log"
ARTIFACTS = {
    "base": "base.mbwt",
    "expert_a": "expert_a.mbwt",
    "expert_b": "expert_b.mbwt",
    "protected_a": "protected_a.mbwt",
    "plan": "plan_a.mbwt",
    "curve_unprotected": "curve_unprotected.csv",
    "curve_protected": "curve_protected.csv",
    "landscape": "landscape.csv",
}
_SEED_SPACE = 2 ** 31


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    # base pretraining
    base_steps: int = 3000
    base_lr: float = 3e-3
    base_batch: int = 96
    base_decay: float = 5.0
    wrong_offset: int = 5
    # expert fine-tuning (SGD with early stopping)
    expert_lr: float = 0.1
    expert_max_steps: int = 3000
    expert_target: float = 0.99
    expert_decay: float = 1.0
    expert_a_trainable: tuple = ("ffn.w1", "ffn.w2")
    expert_b_trainable: tuple = ("attn.wq",)
    # protection of expert A
    flip_fraction: float = 0.5
    taylor_order: int = 8
    rsvd_rank: object = "auto"
    protect_ffn: bool = True
    # merging
    methods: tuple = tuple(m.value for m in MergeMethod)
    lambdas: tuple = (0.3, 0.5, 0.7, 0.9, 1.0)
    trim_keep_fraction: float = 0.2
    drop_rate: float = 0.5
    # explanation
    curve_steps: int = 21
    lmc_margin: float = 0.1
    landscape_steps: int = 25
    landscape_margin: float = 0.2
    epsilon: float = 0.02
    sharpness_samples: int = 8
    ascent_steps: int = 3
    # fine-tune attack
    finetune: bool = True
    finetune_steps: int = 500
    finetune_pool: int = 32
    finetune_lr: float = 1e-3
    finetune_lambda: float = 0.5
    # pre-trained artifacts to reuse instead of training
    base_path: str | None = None
    expert_a_path: str | None = None
    expert_b_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        object.__setattr__(self, "methods", tuple(MergeMethod(m).value for m in self.methods))
        object.__setattr__(self, "expert_a_trainable", tuple(self.expert_a_trainable))
        object.__setattr__(self, "expert_b_trainable", tuple(self.expert_b_trainable))
        if not self.lambdas:
            raise ConfigError("the lambda sweep is empty")
        n_data = self.model.vocab - N_SPECIAL
        if self.task_a().modulus + 2 > n_data:
            raise ConfigError(f"vocab {self.model.vocab} leaves no spare ids for prompt markers")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if isinstance(v, ModelConfig) else (list(v) if isinstance(v, tuple) else v)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {', '.join(unknown)}")
        d = dict(d)
        if isinstance(d.get("model"), dict):
            d["model"] = ModelConfig.from_dict({**ModelConfig().to_dict(), **d["model"]})
        return cls(**d)

    def sub_seed(self, *keys) -> int:
        return keyed_seed(self.seed, *keys) % _SEED_SPACE

    def task_a(self) -> TaskSpec:
        return TaskSpec(TaskKind.MOD_ADD, vocab=self.model.vocab, seq_len=self.model.seq_len,
                        seed=self.sub_seed("task", "a"))

    def task_b(self) -> TaskSpec:
        return TaskSpec(TaskKind.COPY, vocab=self.model.vocab, seq_len=self.model.seq_len,
                        seed=self.sub_seed("task", "b"))


def pretraining_tasks(spec: ScenarioSpec) -> list:
    """Base mixture: wrong answers on the real prompts, right ones behind spare markers."""
    a, b = spec.task_a(), spec.task_b()
    sp = specials(spec.model.vocab)
    spare_add, spare_copy = a.modulus, a.modulus + 1
    s = lambda k: spec.sub_seed("pretrain", k)  # noqa: E731
    return [
        replace(b, task=TaskKind.REVERSE, seed=s("reverse")),
        replace(b, task=TaskKind.REVERSE, marker=sp["COPY"], seed=s("copy-as-reverse")),
        replace(a, offset=spec.wrong_offset, seed=s("shifted-add")),
        replace(a, marker=spare_add, seed=s("spare-add")),
        replace(b, marker=spare_copy, seed=s("spare-copy")),
    ]


def _frozen_except(w: NamedTensors, trainable) -> tuple:
    return tuple(k for k in sorted(w) if not any(t in k for t in trainable))


def train_base(spec: ScenarioSpec) -> NamedTensors:
    tc = TrainConfig(steps=spec.base_steps, lr=spec.base_lr, batch_size=spec.base_batch,
                     seed=spec.sub_seed("train", "base"), weight_decay=spec.base_decay,
                     decay_only=("ffn.w1",))
    w, _ = train(spec.model, init_model(spec.model, spec.sub_seed("init")), pretraining_tasks(spec), tc)
    return w


def train_expert(spec: ScenarioSpec, base: NamedTensors, task: TaskSpec, trainable, key: str):
    """SGD fine-tune of ``trainable`` tensors until validation accuracy reaches the target."""
    tc = TrainConfig(steps=spec.expert_max_steps, lr=spec.expert_lr, optimizer="sgd",
                     seed=spec.sub_seed("train", key), freeze=_frozen_except(base, trainable),
                     weight_decay=spec.expert_decay, decay_only=("ffn.w1",))
    valid = gen_task(task, 256, stream="valid")
    steps = []

    def stop(step, w):
        if step % 10 == 0 and batch_accuracy(spec.model, w, valid) >= spec.expert_target:
            steps.append(step)
            return True
        return False

    w, losses = train(spec.model, base, task, tc, callback=stop)
    return w, (steps[0] if steps else len(losses))


def _merge_sweep(spec: ScenarioSpec, base, models, tasks) -> dict:
    out = {}
    for method in spec.methods:
        rows = []
        for lam in spec.lambdas:
            mc = MergeConfig(MergeMethod(method), lam, spec.trim_keep_fraction, spec.drop_rate,
                             spec.sub_seed("merge", method))
            merged = merge_models(base, models, mc)
            rows.append([lam] + [accuracy(spec.model, merged, t) for t in tasks])
        best = max(rows, key=lambda r: (sum(r[1:]), -r[0]))
        out[method] = {"sweep": rows, "best_lambda": best[0], "best": best[1:],
                       "max_task_a": max(r[1] for r in rows)}
    return out


def _load_staged(path, name, cfg):
    if path is None:
        return None
    if not os.path.exists(path):
        raise StagingError(f"missing artifact {name!r}: {path} does not exist")
    loaded_cfg, w = weights_io.load_model(path)
    if loaded_cfg != cfg:
        raise StagingError(f"artifact {name!r} at {path} was built for a different model config")
    return w


def _curve_summary(curve, fname) -> dict:
    losses = [l for _, l in curve]
    return {"file": fname, "endpoints": [losses[0], losses[-1]], "interior_max": max(losses[1:-1]),
            "barrier": barrier_height(curve)}


def scenario_run(spec: ScenarioSpec, out_dir) -> dict:
    """Run the whole pipeline, write artifacts into ``out_dir`` and return the report."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = spec.model
    check_weights(cfg, init_model(cfg, 0))
    log = []
    clock = time.perf_counter()

    def mark(stage):
        nonlocal clock
        now = time.perf_counter()
        log.append(f"{stage}\t{now - clock:.2f}s")
        clock = now

    ta, tb = spec.task_a(), spec.task_b()
    tasks = [ta, tb]
    staged = {n: _load_staged(p, n, cfg) for n, p in
              (("base", spec.base_path), ("expert_a", spec.expert_a_path), ("expert_b", spec.expert_b_path))}
    base = staged["base"] if staged["base"] is not None else train_base(spec)
    mark("base")
    steps = {}
    if staged["expert_a"] is not None:
        expert_a, steps["expert_a"] = staged["expert_a"], None
    else:
        expert_a, steps["expert_a"] = train_expert(spec, base, ta, spec.expert_a_trainable, "a")
    if staged["expert_b"] is not None:
        expert_b, steps["expert_b"] = staged["expert_b"], None
    else:
        expert_b, steps["expert_b"] = train_expert(spec, base, tb, spec.expert_b_trainable, "b")
    mark("experts")

    pc = ProtectConfig(flip_fraction=spec.flip_fraction, taylor_order=spec.taylor_order,
                       rsvd_rank=spec.rsvd_rank, seed=spec.sub_seed("protect"), protect_ffn=spec.protect_ffn)
    plan = build_projection(cfg, expert_a, pc)
    stats = calibrate_z0(cfg, expert_a, ta, pc) if spec.protect_ffn else None
    taylor = reparameterize_ffn(cfg, expert_a, stats, pc) if spec.protect_ffn else None
    bundle = build_bundle(cfg, expert_a, plan, taylor, pc)
    projected_a = apply_projection(cfg, expert_a, plan)
    mark("protect")

    acc = {
        "base": [accuracy(cfg, base, t) for t in tasks],
        "expert_a": [accuracy(cfg, expert_a, t) for t in tasks],
        "expert_b": [accuracy(cfg, expert_b, t) for t in tasks],
        "protected_a": [accuracy(cfg, bundle.tensors, t) for t in tasks],
    }
    taylor_report = None
    if spec.protect_ffn:
        rs = remainder_stats(cfg, expert_a, bundle, ta)
        taylor_report = {"per_layer": {str(k): v for k, v in sorted(rs.items())},
                         "max_remainder": max(v["max"] for v in rs.values())}

    direct_a = revert_modified_layers(bundle, base, parts=("ffn",))
    revert_a = revert_modified_layers(bundle, base)
    merges = {
        "unprotected": _merge_sweep(spec, base, [expert_a, expert_b], tasks),
        "protected_direct": _merge_sweep(spec, base, [direct_a, expert_b], tasks),
        "layer_revert": _merge_sweep(spec, base, [revert_a, expert_b], tasks),
    }
    solo = [acc["expert_a"][0], acc["expert_b"][1]]
    for res in merges["unprotected"].values():
        # the sweep point where the worse-off expert keeps the largest share of its solo accuracy
        ratios = [[a / s if s > 0 else 0.0 for a, s in zip(row[1:], solo)] for row in res["sweep"]]
        k = max(range(len(ratios)), key=lambda j: (min(ratios[j]), -j))
        res["retention_lambda"] = res["sweep"][k][0]
        res["retention"] = ratios[k]
    mark("merge")

    c_un = interpolation_curve(cfg, expert_a, expert_b, ta, spec.curve_steps)
    c_pr = interpolation_curve(cfg, projected_a, expert_b, ta, spec.curve_steps)
    write_curve_csv(os.path.join(out_dir, ARTIFACTS["curve_unprotected"]), c_un)
    write_curve_csv(os.path.join(out_dir, ARTIFACTS["curve_protected"]), c_pr)
    grid = loss_landscape(cfg, [expert_a, projected_a, expert_b], ta, spec.landscape_steps,
                          spec.landscape_margin)
    write_grid_csv(os.path.join(out_dir, ARTIFACTS["landscape"]), grid,
                   labels=["expert_a", "projected_a", "expert_b"])
    lmc = {"loss_task": ta.task.value, "margin": spec.lmc_margin,
           "unprotected": _curve_summary(c_un, ARTIFACTS["curve_unprotected"]),
           "protected": _curve_summary(c_pr, ARTIFACTS["curve_protected"])}
    landscape = {"file": ARTIFACTS["landscape"], "labels": ["expert_a", "projected_a", "expert_b"],
                 "anchor_coords": grid.anchor_coords.tolist(), "residuals": grid.residuals.tolist(),
                 "eigenvalues": grid.eigenvalues.tolist(), "total_energy": grid.total_energy}
    mark("lmc")

    sc = SharpnessConfig(spec.epsilon, spec.sharpness_samples, spec.ascent_steps, spec.sub_seed("sharpness"))
    sharp = {"config": sc.to_dict(), "original": sharpness(cfg, expert_a, ta, sc),
             "protected": sharpness(cfg, bundle, ta, sc)}
    mark("sharpness")

    attack = None
    if spec.finetune:
        pool = gen_task(replace(ta, seed=spec.sub_seed("attack-pool")), spec.finetune_pool, stream="attack")
        budget = TrainConfig(steps=spec.finetune_steps, lr=spec.finetune_lr, batch_size=16,
                             seed=spec.sub_seed("train", "attack"))
        mc = MergeConfig(MergeMethod.TASK_ARITHMETIC, spec.finetune_lambda)
        attack = {"budget": budget.to_dict(), "pool": spec.finetune_pool, "lambda": spec.finetune_lambda}
        for name, a in (("unprotected", expert_a), ("protected_direct", direct_a), ("layer_revert", revert_a)):
            merged = merge_models(base, [a, expert_b], mc)
            _, curve = finetune_attack(cfg, merged, ta, budget, data=pool, eval_every=100)
            attack[name] = {"curve": [[s, v] for s, v in curve], "gain": curve[-1][1] - curve[0][1]}
        mark("finetune")

    weights_io.save_model(os.path.join(out_dir, ARTIFACTS["base"]), cfg, base)
    weights_io.save_model(os.path.join(out_dir, ARTIFACTS["expert_a"]), cfg, expert_a)
    weights_io.save_model(os.path.join(out_dir, ARTIFACTS["expert_b"]), cfg, expert_b)
    weights_io.save_protected(os.path.join(out_dir, ARTIFACTS["protected_a"]), bundle)
    weights_io.save_plan(os.path.join(out_dir, ARTIFACTS["plan"]), plan)
    mark("save")

    report = {
        "spec": spec.to_dict(),
        "tasks": {"a": ta.to_dict(), "b": tb.to_dict()},
        "chance": [ta.chance, tb.chance],
        "expert_steps": steps,
        "accuracy": acc,
        "taylor": taylor_report,
        "merge": merges,
        "lmc": lmc,
        "landscape": landscape,
        "sharpness": sharp,
        "finetune_attack": attack,
        "artifacts": dict(sorted(ARTIFACTS.items())),
    }
    report = _plain(report)
    with open(os.path.join(out_dir, REPORT_NAME), "wb") as f:
        f.write(weights_io.canonical_json(report) + b"\n")
    with open(os.path.join(out_dir, LOG_NAME), "w") as f:
        f.write("\n".join(log) + "\n")
    return report


def _plain(obj):
    """JSON-ready copy: numpy scalars to Python, tuples to lists."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


def load_report(out_dir) -> dict:
    path = os.path.join(out_dir, REPORT_NAME)
    if not os.path.exists(path):
        raise StagingError(f"missing artifact 'report': {path} does not exist")
    with open(path, "rb") as f:
        return json.loads(f.read())
