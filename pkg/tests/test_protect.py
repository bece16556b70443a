import itertools

import numpy as np
import pytest

from conftest import spiked
from mergebarrier.errors import BundleError, CalibrationError, DimensionError, ParameterError
from mergebarrier.model import Batch, ModelConfig, forward, init_model
from mergebarrier.numkit import jacobi_eigh
from mergebarrier.protect import (
    ProtectConfig, ProtectedModel, apply_projection, build_bundle,
    build_projection, calibrate_batch, calibrate_z0, check_bundle, displacement, head_slices,
    merge_gap, original_ffn, protect, protected_forward, remainder_stats, reparameterize_ffn,
    sign_projection,
)
from mergebarrier.tasks import TaskKind, TaskSpec, gen_task

CONFIGS = [ModelConfig(dim=16, n_heads=1, n_kv_heads=1),
           ModelConfig(dim=32, n_heads=4, n_kv_heads=4),
           ModelConfig(dim=32, n_heads=4, n_kv_heads=2)]


def batch(cfg, n=4, seed=0):
    r = np.random.default_rng(seed)
    return Batch(r.integers(0, cfg.vocab, (n, cfg.seq_len)), r.integers(0, cfg.vocab, (n, cfg.seq_len)))


def test_config_validation():
    for bad in [dict(flip_fraction=1.5), dict(taylor_order=17), dict(calibration_samples=0),
                dict(rsvd_rank=0)]:
        with pytest.raises(ParameterError):
            ProtectConfig(**bad)
    assert ProtectConfig(flip_fraction=0.5).flips(8) == 4
    assert ProtectConfig(flip_fraction=0.3).flips(8) == 3


@pytest.mark.parametrize("cfg", CONFIGS, ids=["single", "mha", "gqa"])
def test_projection_preserves_forward(cfg):
    w = spiked(cfg, 0)
    plan = build_projection(cfg, w, ProtectConfig())
    b = batch(cfg)
    assert np.max(np.abs(forward(cfg, w, b)[0] - forward(cfg, apply_projection(cfg, w, plan), b)[0])) <= 1e-9


def test_plan_algebra():
    cfg = CONFIGS[2]
    plan = build_projection(cfg, spiked(cfg, 1), ProtectConfig(flip_fraction=0.5))
    for p in plan.blocks.values():
        eye = np.eye(p.shape[0])
        assert np.allclose(p, p.T, atol=1e-10)
        assert np.allclose(p @ p, eye, atol=1e-10)
        assert np.allclose(p.T @ p, eye, atol=1e-10)
        assert np.allclose(sorted(np.linalg.eigvalsh(p)), [-1] * 4 + [1] * 4, atol=1e-10)
    q = plan.query_matrix(0)
    assert np.allclose(q[:8, 8:], 0) and np.allclose(q[:8, :8], plan.blocks[(0, 0)])
    assert np.allclose(q[8:16, 8:16], plan.blocks[(0, 0)])   # heads 0, 1 share group 0
    assert np.allclose(plan.key_matrix(0)[8:, 8:], plan.blocks[(0, 1)])


def test_rho_zero_is_identity_bitwise():
    cfg = CONFIGS[1]
    w = spiked(cfg, 2)
    plan = build_projection(cfg, w, ProtectConfig(flip_fraction=0.0))
    assert all(np.array_equal(p, np.eye(cfg.head_dim)) for p in plan.blocks.values())
    out = apply_projection(cfg, w, plan)
    assert all(np.array_equal(out[k], w[k]) for k in w)


def test_identity_inputs_full_flip():
    cfg = ModelConfig(dim=4, n_heads=1, n_kv_heads=1)
    w = init_model(cfg, 0)
    w["layer.0.attn.wq"] = np.eye(4)
    w["layer.0.attn.wk"] = np.eye(4)
    plan = build_projection(cfg, w, ProtectConfig(flip_fraction=1.0))
    assert np.allclose(plan.blocks[(0, 0)], -np.eye(4), atol=1e-12)


@pytest.mark.parametrize("d", [3, 4, 5, 6])
def test_sign_pattern_is_exhaustive_optimum(d):
    r = np.random.default_rng(d)
    for _ in range(5):
        wq, wk = r.normal(size=(7, d)), r.normal(size=(7, d))
        eig = jacobi_eigh(wq.T @ wq + wk.T @ wk)
        for m in range(d + 1):
            built = displacement([wq], wk, sign_projection(eig.eigenvectors, m))
            best = max(displacement([wq], wk, sign_projection(eig.eigenvectors[:, list(c) + [j for j in range(d) if j not in c]], m))
                       for c in itertools.combinations(range(d), m))
            assert built >= best - 1e-9 * max(1.0, best)


def test_merge_gap_monotone_in_rho():
    cfg = CONFIGS[1]
    w = spiked(cfg, 3)
    qs, wk = head_slices(cfg, w, 0, 0)
    gaps = []
    for rho in [0.0, 0.25, 0.5, 0.75, 1.0]:
        p = build_projection(cfg, w, ProtectConfig(flip_fraction=rho)).blocks[(0, 0)]
        gaps.append(merge_gap(qs[0], wk, p))
    assert gaps[0] == pytest.approx(0.0, abs=1e-12)
    assert gaps[2] > 0
    assert all(b >= a - 1e-12 for a, b in zip(gaps, gaps[1:]))


def test_plan_config_mismatch():
    cfg = CONFIGS[1]
    plan = build_projection(cfg, spiked(cfg, 0), ProtectConfig())
    with pytest.raises(DimensionError):
        apply_projection(CONFIGS[0], spiked(CONFIGS[0], 0), plan)


def test_rsvd_path_for_wide_heads():
    cfg = ModelConfig(dim=64, n_heads=1, n_kv_heads=1, ffn_dim=8)
    w = spiked(cfg, 0)
    exact = build_projection(cfg, w, ProtectConfig(rsvd_enabled=False, flip_fraction=0.25))
    fast = build_projection(cfg, w, ProtectConfig(rsvd_enabled=True, flip_fraction=0.25))
    qs, wk = head_slices(cfg, w, 0, 0)
    a = displacement(qs, wk, exact.blocks[(0, 0)])
    b = displacement(qs, wk, fast.blocks[(0, 0)])
    assert b == pytest.approx(a, rel=1e-8)
    b_ = batch(cfg)
    out = apply_projection(cfg, w, fast)
    assert np.max(np.abs(forward(cfg, w, b_)[0] - forward(cfg, out, b_)[0])) <= 1e-9


def test_calibration_examples():
    cfg = ModelConfig(dim=16, n_heads=2, n_kv_heads=2, ffn_dim=8)
    w = init_model(cfg, 0)
    one = batch(cfg, 1)
    st = calibrate_batch(cfg, w, one)
    _, cache = forward(cfg, w, one, keep_cache=True)
    z = cache["layers"][0]["z"].reshape(-1, 8)
    assert np.array_equal(st.z_min[0], z.min(0)) and np.array_equal(st.z_max[0], z.max(0))
    t = TaskSpec(TaskKind.COPY, seed=3)
    a = calibrate_z0(cfg, w, t, ProtectConfig(calibration_samples=20))
    b = calibrate_z0(cfg, w, t, ProtectConfig(calibration_samples=20))
    assert all(np.array_equal(x, y) for x, y in zip(a.z0, b.z0))
    assert all(np.all(lo <= hi) for lo, hi in zip(a.z_min, a.z_max))
    with pytest.raises(CalibrationError):
        calibrate_batch(cfg, w, Batch(np.zeros((0, 10), int), np.zeros((0, 10), int)))


def test_midpoint_arithmetic():
    from mergebarrier.protect import CalibrationStats
    st = CalibrationStats([np.array([-1.0])], [np.array([3.0])], 2)
    assert st.z0[0][0] == 1.0


def _taylor_setup(order, kind="gelu"):
    cfg = ModelConfig(dim=16, n_heads=2, n_kv_heads=2, ffn_dim=8, activation=kind)
    w = init_model(cfg, 5)
    w = {k: v * 5 if "ffn" in k else v for k, v in w.items()}
    t = TaskSpec(TaskKind.COPY, seed=1)
    pc = ProtectConfig(taylor_order=order, calibration_samples=64)
    st = calibrate_z0(cfg, w, t, pc)
    return cfg, w, t, pc, st


def test_coefficients_scale_w2_rows():
    cfg, w, t, pc, st = _taylor_setup(3)
    w["layer.0.ffn.b1"][0] = -st.z0[0][0]     # z0 + b = 0 on unit 0
    tf = reparameterize_ffn(cfg, w, st, pc)[0]
    assert len(tf.coeffs) == 4
    assert np.all(tf.coeffs[0][0] == 0.0)       # gelu(0) = 0


def test_order_zero_exact_at_expansion_point():
    cfg, w, t, pc, st = _taylor_setup(0)
    w1 = np.eye(cfg.dim)[:, :cfg.ffn_dim]
    w = {**w, "layer.1.ffn.w1": w1}
    tf = reparameterize_ffn(cfg, w, st, pc)[1]
    x = np.zeros((1, cfg.dim))
    x[0, :cfg.ffn_dim] = st.z0[1]                 # z = x @ w1 = z0
    assert np.allclose(tf(x), original_ffn(cfg, w, 1, x), atol=1e-12)


def test_order_zero_remainder_definition():
    cfg, w, t, pc, st = _taylor_setup(0)
    bun = build_bundle(cfg, w, None, reparameterize_ffn(cfg, w, st, pc), pc)
    b = gen_task(t, 16, stream="eval")
    rep = remainder_stats(cfg, w, bun, b)
    _, cache = forward(cfg, w, b, keep_cache=True)
    from mergebarrier.activations import act_eval
    x = cache["layers"][0]["f_in"]
    z = x @ w["layer.0.ffn.w1"]
    b1 = w["layer.0.ffn.b1"]
    expect = np.abs((act_eval("gelu", z + b1) - act_eval("gelu", st.z0[0] + b1)) @ w["layer.0.ffn.w2"])
    assert rep[0]["max"] == pytest.approx(expect.max(), rel=1e-10)
    assert rep[0]["mean"] >= 0


def test_taylor_error_decreases_with_order():
    errs = []
    for n in [2, 4, 6, 8]:
        cfg, w, t, pc, st = _taylor_setup(n)
        bun = build_bundle(cfg, w, None, reparameterize_ffn(cfg, w, st, pc), pc)
        cal = gen_task(t, pc.calibration_samples, stream="calibration")
        errs.append(max(v["max"] for v in remainder_stats(cfg, w, bun, cal).values()))
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_bundle_concealment_and_forward():
    cfg, w, t, pc, st = _taylor_setup(8)
    bun = protect(cfg, w, t, pc)
    for i in range(cfg.n_layers):
        assert f"layer.{i}.ffn.w2" not in bun.tensors
        assert not any(np.array_equal(v, w[f"layer.{i}.ffn.w2"]) for v in bun.tensors.values())
    b = gen_task(t, 8, stream="calibration")
    assert np.max(np.abs(protected_forward(cfg, bun, b) - forward(cfg, w, b)[0])) < 1e-4
    assert bun.manifest["taylor_layers"] == [0, 1]
    assert bun.manifest["projected_layers"] == [0, 1]


def test_attention_only_protection_is_equivalent():
    cfg, w, t, _, _ = _taylor_setup(8)
    bun = protect(cfg, w, t, ProtectConfig(protect_ffn=False))
    b = batch(cfg)
    assert np.max(np.abs(protected_forward(cfg, bun, b) - forward(cfg, w, b)[0])) <= 1e-9


def test_bundle_errors():
    cfg, w, t, pc, st = _taylor_setup(2)
    bun = protect(cfg, w, t, pc)
    broken = ProtectedModel(cfg, {k: v for k, v in bun.tensors.items() if k != "layer.0.tffn.coef2"},
                            dict(bun.manifest))
    with pytest.raises(BundleError):
        check_bundle(broken)
    bad_shape = dict(bun.tensors)
    bad_shape["layer.1.tffn.z0"] = np.zeros(3)
    with pytest.raises(BundleError):
        protected_forward(cfg, ProtectedModel(cfg, bad_shape, bun.manifest), batch(cfg))


def test_out_of_range_inputs_grow_error():
    cfg, w, t, pc, st = _taylor_setup(4)
    bun = protect(cfg, w, t, pc)
    inside = gen_task(t, 32, stream="calibration")
    outside = gen_task(TaskSpec(TaskKind.MOD_ADD, seed=9), 32)
    e_in = max(v["max"] for v in remainder_stats(cfg, w, bun, inside).values())
    e_out = max(v["max"] for v in remainder_stats(cfg, w, bun, outside).values())
    assert e_out > e_in
