"""MBWT: a minimal little-endian tensor container.

Layout::

    "MBWT" | version u32 | flags u32 | tensor_count u32 | metadata_len u32 | metadata (UTF-8 JSON)
    per tensor: name_len u16 | name (UTF-8) | dtype u8 (0 = f64) | ndim u8 | dims u64 * ndim | payload

Flag bit 0 marks a bundle that contains protected layers. Metadata records
the bundle kind, the model config and, for protected bundles, the manifest.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .attack import ParamsKeys
from .errors import CorruptionError, FormatError, SchemaError
from .model import ModelConfig, NamedTensors, canonical, check_weights
from .protect import ProjectionPlan, ProtectedModel, check_bundle

MAGIC = b"MBWT"
VERSION = 1
FLAG_PROTECTED = 1
DTYPE_F64 = 0
_HEADER = struct.Struct("<4sIIII")


@dataclass
class MbwtFile:
    tensors: NamedTensors
    metadata: dict
    flags: int = 0

    @property
    def kind(self) -> str:
        return self.metadata.get("kind", "tensors")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode(tensors: NamedTensors, metadata: dict | None = None, flags: int = 0) -> bytes:
    meta = canonical_json(metadata or {})
    parts = [_HEADER.pack(MAGIC, VERSION, flags, len(tensors), len(meta)), meta]
    for name in sorted(tensors):
        a = np.asarray(tensors[name], dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or a.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", DTYPE_F64, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.at = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.at + n > len(self.data):
            raise CorruptionError(f"truncated {what} at byte offset {self.at}", offset=self.at)
        out = self.data[self.at:self.at + n]
        self.at += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> MbwtFile:
    r = _Reader(data)
    if len(data) < 8:
        raise FormatError("not an MBWT file (too short for magic and version)")
    magic, version = struct.unpack("<4sI", data[:8])
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported MBWT version {version}")
    _, _, flags, count, meta_len = r.unpack("<4sIIII", "header")
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptionError(f"unreadable metadata: {e}", offset=_HEADER.size) from e
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "tensor name length")
        name = r.take(n, "tensor name").decode("utf-8", errors="strict")
        at = r.at
        dtype, ndim = r.unpack("<BB", "tensor header")
        if dtype != DTYPE_F64:
            raise FormatError(f"tensor {name!r}: unsupported dtype code {dtype} at byte offset {at}")
        dims = r.unpack(f"<{ndim}Q", "tensor dims")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(8 * size, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if r.at != len(data):
        raise CorruptionError(f"{len(data) - r.at} trailing bytes at byte offset {r.at}", offset=r.at)
    return MbwtFile(canonical(tensors), metadata, flags)


def save(path, tensors: NamedTensors, metadata: dict | None = None, flags: int = 0) -> None:
    data = encode(tensors, metadata, flags)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load(path) -> MbwtFile:
    with open(path, "rb") as f:
        return decode(f.read())


# ---------------------------------------------------------------------------
# typed bundles
# ---------------------------------------------------------------------------

def save_model(path, cfg: ModelConfig, w: NamedTensors, extra: dict | None = None) -> None:
    check_weights(cfg, w)
    meta = {"kind": "model", "config": cfg.to_dict()}
    if extra:
        meta["extra"] = extra
    save(path, w, meta)


def save_protected(path, bundle: ProtectedModel, extra: dict | None = None) -> None:
    check_bundle(bundle)
    meta = {"kind": "protected", "config": bundle.cfg.to_dict(), "manifest": bundle.manifest}
    if extra:
        meta["extra"] = extra
    flags = FLAG_PROTECTED if (bundle.projected_layers or bundle.taylor_layers) else 0
    save(path, bundle.tensors, meta, flags)


def _config(f: MbwtFile) -> ModelConfig:
    if "config" not in f.metadata:
        raise SchemaError("file carries no model config")
    return ModelConfig.from_dict(f.metadata["config"])


def load_model(path) -> tuple:
    """``(cfg, tensors)`` for a plain model file."""
    f = load(path)
    if f.kind != "model":
        raise SchemaError(f"expected a model file, found kind {f.kind!r}")
    cfg = _config(f)
    check_weights(cfg, f.tensors)
    return cfg, f.tensors


def load_protected(path) -> ProtectedModel:
    f = load(path)
    if f.kind != "protected":
        raise SchemaError(f"expected a protected bundle, found kind {f.kind!r}")
    bundle = ProtectedModel(_config(f), f.tensors, f.metadata.get("manifest", {}))
    try:
        check_bundle(bundle)
    except Exception as e:
        raise SchemaError(str(e)) from e
    return bundle


def load_any(path):
    """A plain model as ``(cfg, tensors)`` or a :class:`ProtectedModel`."""
    f = load(path)
    if f.kind == "protected":
        return load_protected(path)
    return load_model(path)


def save_plan(path, plan: ProjectionPlan) -> None:
    t = {}
    for (i, g), b in plan.blocks.items():
        t[f"plan.layer.{i}.group.{g}"] = b
        if (i, g) in plan.eigenvalues:
            t[f"spectrum.layer.{i}.group.{g}"] = np.asarray(plan.eigenvalues[(i, g)])
    meta = {"kind": "plan", "head_dim": plan.head_dim, "n_heads": plan.n_heads,
            "n_kv_heads": plan.n_kv_heads}
    save(path, t, meta)


def _layer_group(name: str):
    parts = name.split(".")
    return int(parts[2]), int(parts[4])


def load_plan(path) -> ProjectionPlan:
    f = load(path)
    if f.kind != "plan":
        raise SchemaError(f"expected a projection plan, found kind {f.kind!r}")
    m = f.metadata
    blocks = {_layer_group(k): v for k, v in f.tensors.items() if k.startswith("plan.")}
    spectra = {_layer_group(k): v for k, v in f.tensors.items() if k.startswith("spectrum.")}
    return ProjectionPlan(m["head_dim"], m["n_heads"], m["n_kv_heads"], blocks, spectra)


def save_keys(path, keys: ParamsKeys) -> None:
    t = {f"keys.layer.{i}.perm": np.asarray(p, dtype=np.float64) for i, p in keys.perms.items()}
    for (i, g), (a, b) in keys.scales.items():
        t[f"keys.layer.{i}.group.{g}.a"] = a
        t[f"keys.layer.{i}.group.{g}.b"] = b
    save(path, t, {"kind": "keys"})


def load_keys(path) -> ParamsKeys:
    f = load(path)
    if f.kind != "keys":
        raise SchemaError(f"expected PaRaMS keys, found kind {f.kind!r}")
    perms, scales = {}, {}
    for k, v in f.tensors.items():
        parts = k.split(".")
        if parts[-1] == "perm":
            perms[int(parts[2])] = v.astype(np.int64)
        elif parts[-1] == "a":
            i, g = int(parts[2]), int(parts[4])
            scales[(i, g)] = (v, f.tensors[f"keys.layer.{i}.group.{g}.b"])
    return ParamsKeys(perms, scales)
