import numpy as np
import pytest

from conftest import spiked
from mergebarrier import weights_io as io
from mergebarrier.attack import random_keys
from mergebarrier.errors import CorruptionError, FormatError, SchemaError
from mergebarrier.model import ModelConfig, init_model
from mergebarrier.protect import ProtectConfig, build_projection, protect
from mergebarrier.tasks import TaskKind, TaskSpec


def test_model_round_trip_is_bitwise(small_cfg, tmp_path):
    w = spiked(small_cfg, 0)
    io.save_model(tmp_path / "m.mbwt", small_cfg, w)
    cfg, back = io.load_model(tmp_path / "m.mbwt")
    assert cfg == small_cfg
    assert set(back) == set(w)
    assert all(back[k].tobytes() == w[k].tobytes() for k in w)


def test_encoding_is_deterministic(small_cfg):
    w = init_model(small_cfg, 0)
    shuffled = dict(reversed(list(w.items())))
    assert io.encode(w, {"b": 1, "a": 2}) == io.encode(shuffled, {"a": 2, "b": 1})


def test_special_values_survive(tmp_path):
    t = {"x": np.array([0.0, -0.0, np.inf, -np.inf, 5e-324, np.nan]), "s": np.array(3.5)}
    io.save(tmp_path / "t.mbwt", t)
    back = io.load(tmp_path / "t.mbwt").tensors
    assert back["x"].tobytes() == t["x"].tobytes()
    assert back["s"].shape == ()


def test_bad_magic_and_version(small_cfg):
    data = bytearray(io.encode(init_model(small_cfg, 0)))
    bad = bytes([data[0] ^ 0xFF]) + bytes(data[1:])
    with pytest.raises(FormatError):
        io.decode(bad)
    data[4] = 99
    with pytest.raises(FormatError):
        io.decode(bytes(data))


def test_truncation_reports_offset(small_cfg):
    data = io.encode(init_model(small_cfg, 0))
    for cut in (10, len(data) // 2, len(data) - 1):
        with pytest.raises(CorruptionError) as e:
            io.decode(data[:cut])
        assert e.value.offset <= cut
    with pytest.raises(CorruptionError):
        io.decode(data + b"\0")


def test_schema_mismatch(small_cfg, tmp_path):
    w = init_model(small_cfg, 0)
    io.save(tmp_path / "m.mbwt", {k: v for k, v in w.items() if k != "embed.tok"},
            {"kind": "model", "config": small_cfg.to_dict()})
    with pytest.raises(SchemaError):
        io.load_model(tmp_path / "m.mbwt")
    io.save(tmp_path / "k.mbwt", w, {"kind": "keys"})
    with pytest.raises(SchemaError):
        io.load_model(tmp_path / "k.mbwt")


def test_protected_bundle_round_trip(tmp_path):
    cfg = ModelConfig(vocab=24, dim=16, n_layers=2, n_heads=4, n_kv_heads=2, ffn_dim=12, seq_len=10)
    task = TaskSpec(TaskKind.COPY, vocab=24, seq_len=10, span=3)
    bundle = protect(cfg, spiked(cfg, 0), task, ProtectConfig(taylor_order=4, calibration_samples=32))
    io.save_protected(tmp_path / "p.mbwt", bundle)
    back = io.load_any(tmp_path / "p.mbwt")
    assert back.manifest == bundle.manifest
    assert back.projected_layers == bundle.projected_layers and back.taylor_layers == bundle.taylor_layers
    assert all(back.tensors[k].tobytes() == bundle.tensors[k].tobytes() for k in bundle.tensors)
    assert io.load(tmp_path / "p.mbwt").flags & io.FLAG_PROTECTED


def test_plan_and_keys_round_trip(small_cfg, tmp_path):
    plan = build_projection(small_cfg, spiked(small_cfg, 0), ProtectConfig())
    io.save_plan(tmp_path / "plan.mbwt", plan)
    back = io.load_plan(tmp_path / "plan.mbwt")
    assert set(back.blocks) == set(plan.blocks)
    assert all(np.array_equal(back.blocks[k], plan.blocks[k]) for k in plan.blocks)
    keys = random_keys(small_cfg, 1, 0.5, 2.0)
    io.save_keys(tmp_path / "keys.mbwt", keys)
    k2 = io.load_keys(tmp_path / "keys.mbwt")
    assert all(np.array_equal(k2.perms[i], keys.perms[i]) for i in keys.perms)
    assert all(np.array_equal(k2.scales[g][j], keys.scales[g][j]) for g in keys.scales for j in (0, 1))
