"""Command-line driver: ``python -m mergebarrier <command> [flags]``.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines (``#`` starts a comment), then command-line flags.
Every command writes a canonical JSON report into ``--out`` that echoes the
effective settings. Exit status: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import weights_io
from .attack import decode_params, finetune_attack, revert_modified_layers
from .errors import ConfigError, MergeBarrierError
from .evaluation import (SharpnessConfig, barrier_height, interpolation_curve, loss_landscape,
                         sharpness, write_curve_csv, write_grid_csv)
from .merge import MergeConfig, MergeMethod, merge_models
from .model import ModelConfig, forward, init_model
from .protect import ProtectConfig, ProtectedModel, protect
from .scenario import ScenarioSpec, scenario_run
from .tasks import TaskKind, TaskSpec, gen_task
from .training import TrainConfig, accuracy, train

COMMANDS = {
    "train": "train a model on one task",
    "protect": "project attention and reparameterize FFN blocks of a model",
    "merge": "merge experts into a base model",
    "attack": "revert, decode or fine-tune a protected or merged model",
    "curve": "loss along the straight line between two models",
    "landscape": "loss over the plane through three models",
    "sharpness": "worst-case loss increase in a small ball around a model",
    "scenario": "run the full train, protect, merge and attack pipeline",
    "inspect": "print the header and tensor shapes of a weights file",
}

# key -> (default, help)
DEFAULTS = {
    "seed": (0, "root seed for every random choice"),
    "out": ("out", "output directory"),
    "model": ([], "model or bundle file(s); repeat the flag for several"),
    "base": (None, "base model file"),
    "task": ("mod_add", "task name: mod_add, copy or reverse"),
    "rho": (0.5, "fraction of eigen-directions flipped per attention block"),
    "taylor_order": (8, "Taylor expansion order for protected FFN layers"),
    "rsvd_rank": ("auto", "rank for the randomized eigen-solver, or auto"),
    "no_ffn": (False, "skip the Taylor FFN protection"),
    "method": ("task_arithmetic", "merge method: task_arithmetic, ties, dare_task or dare_ties"),
    "lambda": (1.0, "task-vector scaling coefficient"),
    "trim": (0.2, "TIES keep fraction"),
    "p": (0.5, "DARE drop rate"),
    "epsilon": (0.02, "sharpness perturbation radius"),
    "samples": (8, "sharpness random directions"),
    "steps": (None, "training steps (500), curve points (21) or landscape grid side (25)"),
    "lr": (3e-3, "learning rate"),
    "batch_size": (64, "training batch size"),
    "optimizer": ("adam", "adam or sgd"),
    "pool": (32, "labelled examples available to the fine-tune attack"),
    "kind": ("revert", "attack kind: revert, params or finetune"),
    "margin": (0.2, "landscape margin around the anchors"),
}
_SCENARIO_FLAGS = {"rho": "flip_fraction", "taylor_order": "taylor_order", "rsvd_rank": "rsvd_rank",
                   "epsilon": "epsilon", "samples": "sharpness_samples", "steps": "finetune_steps",
                   "trim": "trim_keep_fraction", "p": "drop_rate"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mergebarrier", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, summary in COMMANDS.items():
        s = sub.add_parser(name, help=summary, description=summary)
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--config", help="file of key = value lines")
        s.add_argument("--model", action="append")
        s.add_argument("--base")
        s.add_argument("--task")
        s.add_argument("--rho", type=float)
        s.add_argument("--taylor-order", type=int, dest="taylor_order")
        s.add_argument("--rsvd-rank", dest="rsvd_rank")
        s.add_argument("--no-ffn", action="store_const", const=True, dest="no_ffn")
        s.add_argument("--method")
        s.add_argument("--lambda", type=float, dest="lambda")
        s.add_argument("--trim", type=float)
        s.add_argument("--p", type=float)
        s.add_argument("--epsilon", type=float)
        s.add_argument("--samples", type=int)
        s.add_argument("--steps", type=int)
    return p


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in t:
        return [_value(x) for x in t.split(",") if x.strip()]
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as f:
        for n, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected 'key = value', got {raw.strip()!r}")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = _value(v)
    return out


def format_config(cfg: dict) -> str:
    """Inverse of :func:`read_config` for the values a config can hold."""
    def fmt(v):
        if isinstance(v, (list, tuple)):
            return ", ".join(fmt(x) for x in v) + ("," if len(v) == 1 else "")
        if v is None:
            return "none"
        if isinstance(v, bool):
            return "true" if v else "false"
        return repr(v) if isinstance(v, float) else str(v)
    return "".join(f"{k} = {fmt(v)}\n" for k, v in sorted(cfg.items()))


def effective_config(command: str, args: argparse.Namespace) -> dict:
    cfg = {k: (list(v) if isinstance(v, list) else v) for k, (v, _) in DEFAULTS.items()}
    scenario_keys = {f for f in ScenarioSpec().to_dict()} if command == "scenario" else set()
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file {args.config} does not exist")
        for k, v in read_config(args.config).items():
            if k not in cfg and k not in scenario_keys:
                raise UsageError(f"unknown config key {k!r} in {args.config}")
            cfg[k] = v
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if cfg["model"] is None:
        cfg["model"] = []
    elif isinstance(cfg["model"], str):
        cfg["model"] = [cfg["model"]]
    return cfg


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _task(cfg) -> TaskSpec:
    try:
        return TaskSpec(TaskKind(cfg["task"]), seed=int(cfg["seed"]))
    except ValueError as e:
        raise ConfigError(f"unknown task {cfg['task']!r}") from e


def _steps(cfg, default: int) -> int:
    return int(cfg["steps"]) if cfg["steps"] is not None else default


def _write_report(cfg, name: str, body: dict) -> str:
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], f"{name}.json")
    with open(path, "wb") as f:
        f.write(weights_io.canonical_json({"command": name, "config": cfg, **body}) + b"\n")
    return path


def _models(cfg, need: int, exact: bool = False) -> list:
    paths = cfg["model"]
    if len(paths) < need or (exact and len(paths) != need):
        raise UsageError(f"expected {'exactly' if exact else 'at least'} {need} --model file(s), got {len(paths)}")
    return [weights_io.load_any(p) for p in paths]


def _cfg_of(item) -> ModelConfig:
    return item.cfg if isinstance(item, ProtectedModel) else item[0]


def _tensors(item):
    return item if isinstance(item, ProtectedModel) else item[1]


def _load_base(cfg):
    if not cfg["base"]:
        raise UsageError("--base is required")
    return weights_io.load_model(cfg["base"])


def _protect_config(cfg) -> ProtectConfig:
    rank = cfg["rsvd_rank"]
    rank = rank if rank == "auto" else int(rank)
    return ProtectConfig(flip_fraction=float(cfg["rho"]), taylor_order=int(cfg["taylor_order"]),
                         rsvd_rank=rank, seed=int(cfg["seed"]), protect_ffn=not cfg["no_ffn"])


def _merge_config(cfg) -> MergeConfig:
    try:
        method = MergeMethod(cfg["method"])
    except ValueError as e:
        raise ConfigError(f"unknown merge method {cfg['method']!r}") from e
    return MergeConfig(method, float(cfg["lambda"]), float(cfg["trim"]), float(cfg["p"]), int(cfg["seed"]))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg):
    task = _task(cfg)
    if cfg["base"]:
        mcfg, w0 = weights_io.load_model(cfg["base"])
    else:
        mcfg = ModelConfig()
        w0 = init_model(mcfg, int(cfg["seed"]))
    tc = TrainConfig(steps=_steps(cfg, 500), lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
                     seed=int(cfg["seed"]), optimizer=cfg["optimizer"])
    w, losses = train(mcfg, w0, task, tc)
    path = os.path.join(cfg["out"], "model.mbwt")
    os.makedirs(cfg["out"], exist_ok=True)
    weights_io.save_model(path, mcfg, w)
    return _write_report(cfg, "train", {"model_file": "model.mbwt", "final_loss": losses[-1] if losses else None,
                                        "accuracy": accuracy(mcfg, w, task), "task_spec": task.to_dict()})


def cmd_protect(cfg):
    pc = _protect_config(cfg)
    (item,) = _models(cfg, 1, exact=True)
    if isinstance(item, ProtectedModel):
        raise ConfigError("model is already protected")
    mcfg, w = item
    task = _task(cfg)
    bundle = protect(mcfg, w, task, pc)
    batch = gen_task(task, 256, stream="check")
    diff = float(np.max(np.abs(forward(mcfg, w, batch)[0] - forward(mcfg, bundle.tensors, batch)[0])))
    os.makedirs(cfg["out"], exist_ok=True)
    weights_io.save_protected(os.path.join(cfg["out"], "protected.mbwt"), bundle)
    return _write_report(cfg, "protect", {"bundle_file": "protected.mbwt", "manifest": bundle.manifest,
                                          "max_logit_difference": diff,
                                          "accuracy": [accuracy(mcfg, w, task), accuracy(mcfg, bundle.tensors, task)]})


def cmd_merge(cfg):
    mc = _merge_config(cfg)
    bcfg, base = _load_base(cfg)
    items = _models(cfg, 1)
    experts, notes = [], []
    for path, item in zip(cfg["model"], items):
        if isinstance(item, ProtectedModel):
            # Taylor layers have no counterpart in the base schema; they fall back to the base.
            experts.append(revert_modified_layers(item, base, parts=("ffn",)))
            notes.append(f"{path}: protected FFN layers replaced by the base to match the schema")
        else:
            experts.append(item[1])
    merged = merge_models(base, experts, mc)
    os.makedirs(cfg["out"], exist_ok=True)
    weights_io.save_model(os.path.join(cfg["out"], "merged.mbwt"), bcfg, merged)
    body = {"merged_file": "merged.mbwt", "notes": notes}
    if cfg["task"]:
        body["accuracy"] = accuracy(bcfg, merged, _task(cfg))
    return _write_report(cfg, "merge", body)


def cmd_attack(cfg):
    kind = cfg["kind"]
    (item,) = _models(cfg, 1, exact=True)
    os.makedirs(cfg["out"], exist_ok=True)
    if kind == "revert":
        bcfg, base = _load_base(cfg)
        w = revert_modified_layers(item, base)
        weights_io.save_model(os.path.join(cfg["out"], "reverted.mbwt"), bcfg, w)
        return _write_report(cfg, "attack", {"kind": kind, "model_file": "reverted.mbwt"})
    if isinstance(item, ProtectedModel):
        raise ConfigError(f"attack kind {kind!r} needs a plain model")
    mcfg, w = item
    if kind == "params":
        _, base = _load_base(cfg)
        decoded, keys = decode_params(mcfg, w, base)
        weights_io.save_model(os.path.join(cfg["out"], "decoded.mbwt"), mcfg, decoded)
        weights_io.save_keys(os.path.join(cfg["out"], "keys.mbwt"), keys)
        return _write_report(cfg, "attack", {"kind": kind, "model_file": "decoded.mbwt", "keys_file": "keys.mbwt"})
    if kind == "finetune":
        task = _task(cfg)
        pool = gen_task(task.with_seed(int(cfg["seed"]) + 1), int(cfg["pool"]), stream="attack")
        tc = TrainConfig(steps=_steps(cfg, 500), lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
                         seed=int(cfg["seed"]), optimizer=cfg["optimizer"])
        w2, curve = finetune_attack(mcfg, w, task, tc, data=pool)
        weights_io.save_model(os.path.join(cfg["out"], "finetuned.mbwt"), mcfg, w2)
        return _write_report(cfg, "attack", {"kind": kind, "model_file": "finetuned.mbwt",
                                             "curve": [[s, a] for s, a in curve],
                                             "gain": curve[-1][1] - curve[0][1]})
    raise ConfigError(f"unknown attack kind {kind!r}; expected revert, params or finetune")


def cmd_curve(cfg):
    a, b = _models(cfg, 2, exact=True)
    if _cfg_of(a) != _cfg_of(b):
        raise ConfigError("models were built for different configs")
    steps = _steps(cfg, 21)
    curve = interpolation_curve(_cfg_of(a), _tensors(a), _tensors(b), _task(cfg), steps)
    os.makedirs(cfg["out"], exist_ok=True)
    write_curve_csv(os.path.join(cfg["out"], "curve.csv"), curve)
    return _write_report(cfg, "curve", {"curve_file": "curve.csv", "barrier": barrier_height(curve),
                                        "endpoints": [curve[0][1], curve[-1][1]]})


def cmd_landscape(cfg):
    items = _models(cfg, 2)
    steps = _steps(cfg, 25)
    grid = loss_landscape(_cfg_of(items[0]), [_tensors(i) for i in items], _task(cfg), steps,
                          float(cfg["margin"]), seed=int(cfg["seed"]))
    os.makedirs(cfg["out"], exist_ok=True)
    write_grid_csv(os.path.join(cfg["out"], "landscape.csv"), grid, labels=cfg["model"])
    return _write_report(cfg, "landscape", {"grid_file": "landscape.csv", "anchor_coords": grid.anchor_coords.tolist(),
                                            "residuals": grid.residuals.tolist(),
                                            "eigenvalues": grid.eigenvalues.tolist()})


def cmd_sharpness(cfg):
    (item,) = _models(cfg, 1, exact=True)
    sc = SharpnessConfig(float(cfg["epsilon"]), int(cfg["samples"]), seed=int(cfg["seed"]))
    value = sharpness(_cfg_of(item), _tensors(item), _task(cfg), sc)
    return _write_report(cfg, "sharpness", {"sharpness": value})


def cmd_scenario(cfg):
    known = ScenarioSpec().to_dict()
    d = {k: v for k, v in cfg.items() if k in known}
    d["seed"] = int(cfg["seed"])
    for flag, field_name in _SCENARIO_FLAGS.items():
        if cfg[flag] != DEFAULTS[flag][0]:
            d[field_name] = cfg[flag]
    if cfg["no_ffn"]:
        d["protect_ffn"] = False
    if cfg["method"] != DEFAULTS["method"][0]:
        d["methods"] = [cfg["method"]]
    if cfg["lambda"] != DEFAULTS["lambda"][0]:
        d["lambdas"] = [cfg["lambda"]]
    for k in ("lambdas", "methods", "expert_a_trainable", "expert_b_trainable"):
        if k in d and not isinstance(d[k], (list, tuple)):
            d[k] = [d[k]]
    spec = ScenarioSpec.from_dict(d)
    scenario_run(spec, cfg["out"])
    return os.path.join(cfg["out"], "report.json")


def cmd_inspect(cfg):
    (path,) = cfg["model"] if len(cfg["model"]) == 1 else (None,)
    if path is None:
        raise UsageError("inspect needs exactly one --model file")
    f = weights_io.load(path)
    summary = {"kind": f.kind, "flags": f.flags, "metadata": f.metadata,
               "tensors": {k: list(np.shape(v)) for k, v in f.tensors.items()},
               "parameters": int(sum(np.size(v) for v in f.tensors.values()))}
    sys.stdout.write(weights_io.canonical_json(summary).decode("utf-8") + "\n")
    return None


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        cfg = effective_config(args.command, args)
    except UsageError as e:
        sys.stderr.write(f"usage error: {e}\n")
        return 2
    except MergeBarrierError as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    try:
        out = HANDLERS[args.command](cfg)
    except UsageError as e:
        parser.print_help(sys.stderr)
        sys.stderr.write(f"usage error: {e}\n")
        return 2
    except (MergeBarrierError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    if out:
        sys.stdout.write(f"{out}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
