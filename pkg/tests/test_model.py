import math

import numpy as np
import pytest

from mergebarrier.errors import ConfigError, DegenerateBatchError, InputError, SchemaError
from mergebarrier.model import (
    Batch, ModelConfig, check_weights, forward, init_model, loss, loss_and_grad,
)
from mergebarrier.tasks import TaskKind, TaskSpec, gen_task, mod_add_batch
from mergebarrier.training import TrainConfig, accuracy, train


def random_batch(cfg, n=3, seed=0):
    r = np.random.default_rng(seed)
    toks = r.integers(0, cfg.vocab, size=(n, cfg.seq_len))
    return Batch(toks, r.integers(0, cfg.vocab, size=(n, cfg.seq_len)))


def test_config_invariants():
    with pytest.raises(ConfigError):
        ModelConfig(dim=30, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(n_heads=4, n_kv_heads=3)
    assert ModelConfig(n_heads=4, n_kv_heads=2).group_size == 2


def test_init_schema_and_determinism():
    cfg = ModelConfig()
    a, b = init_model(cfg, 1), init_model(cfg, 1)
    assert len(a) == 2 * 9 + 3
    assert all(np.array_equal(a[k], b[k]) for k in a)
    check_weights(cfg, a)
    assert not np.array_equal(a["head.w"], init_model(cfg, 2)["head.w"])
    assert np.all(a["layer.0.ffn.b1"] == 0) and np.all(a["layer.1.norm.g"] == 1)


def test_schema_errors():
    cfg = ModelConfig()
    w = init_model(cfg, 0)
    del w["head.w"]
    with pytest.raises(SchemaError):
        check_weights(cfg, w)


def test_uniform_logits_loss_is_log_vocab():
    cfg = ModelConfig(vocab=24)
    w = {k: np.zeros_like(v) for k, v in init_model(cfg, 0).items()}
    assert loss(cfg, w, random_batch(cfg)) == pytest.approx(math.log(24), abs=1e-12)


def test_repeated_rows_give_identical_logits():
    cfg = ModelConfig()
    w = init_model(cfg, 0)
    b = random_batch(cfg, 1)
    rep = Batch(np.repeat(b.tokens, 3, 0), np.repeat(b.targets, 3, 0))
    lg = forward(cfg, w, rep)[0].reshape(3, cfg.seq_len, -1)
    assert np.array_equal(lg[0], lg[1]) and np.array_equal(lg[0], lg[2])
    assert loss(cfg, w, rep) == pytest.approx(loss(cfg, w, b), abs=1e-14)


def test_single_head_mha_equals_gqa_form():
    a = ModelConfig(n_heads=1, n_kv_heads=1)
    w = init_model(a, 0)
    b = random_batch(a)
    l1 = forward(a, w, b)[0]
    l2 = forward(ModelConfig(n_heads=1, n_kv_heads=1), w, b)[0]
    assert np.array_equal(l1, l2)


def test_causality():
    cfg = ModelConfig()
    w = {k: v * 10 for k, v in init_model(cfg, 0).items()}
    b = random_batch(cfg, 1)
    t = b.tokens.copy()
    t[0, 6] = (t[0, 6] + 1) % cfg.vocab
    l1 = forward(cfg, w, b)[0]
    l2 = forward(cfg, w, Batch(t, b.targets))[0]
    assert np.array_equal(l1[:6], l2[:6])
    assert not np.array_equal(l1[6:], l2[6:])


def test_errors():
    cfg = ModelConfig()
    w = init_model(cfg, 0)
    bad = Batch(np.full((1, cfg.seq_len), cfg.vocab), np.zeros((1, cfg.seq_len), dtype=int))
    with pytest.raises(InputError):
        forward(cfg, w, bad)
    masked = random_batch(cfg)
    masked.loss_mask[:] = False
    with pytest.raises(DegenerateBatchError):
        loss(cfg, w, masked)


@pytest.mark.parametrize("kv", [2, 1])
@pytest.mark.parametrize("act", ["gelu", "silu"])
def test_gradient_check(kv, act):
    cfg = ModelConfig(vocab=11, dim=8, n_layers=2, n_heads=2, n_kv_heads=kv, ffn_dim=6, seq_len=5,
                      activation=act)
    w = {k: v * 25 if v.ndim == 2 else v + 0.1 for k, v in init_model(cfg, 3).items()}
    batch = random_batch(cfg, 4, seed=1)
    _, g = loss_and_grad(cfg, w, batch)
    r = np.random.default_rng(0)
    for k, v in w.items():
        for _ in range(5):
            idx = tuple(r.integers(0, s) for s in v.shape)
            wp = {**w, k: v.copy()}
            wm = {**w, k: v.copy()}
            wp[k][idx] += 1e-5
            wm[k][idx] -= 1e-5
            num = (loss(cfg, wp, batch) - loss(cfg, wm, batch)) / 2e-5
            assert abs(num - g[k][idx]) <= max(1e-4 * abs(g[k][idx]), 1e-6), (k, idx)


def test_mod_add_example():
    t = TaskSpec(TaskKind.MOD_ADD, modulus=7)
    b = mod_add_batch(t, [(3, 5)])
    assert b.targets[0, 3] == 1
    assert b.loss_mask.sum() == 1


def test_copy_and_reverse_layout():
    for kind, expect in [(TaskKind.COPY, lambda xs: xs), (TaskKind.REVERSE, lambda xs: xs[::-1])]:
        t = TaskSpec(kind, span=3)
        b = gen_task(t, 5)
        for row in range(5):
            xs = b.tokens[row, 1:4]
            assert np.array_equal(b.targets[row][b.loss_mask[row]], expect(xs))


def test_task_determinism_and_errors():
    t = TaskSpec(TaskKind.COPY, seed=4)
    assert np.array_equal(gen_task(t, 8).tokens, gen_task(t, 8).tokens)
    with pytest.raises(ConfigError):
        TaskSpec(TaskKind.MOD_ADD, modulus=30)
    with pytest.raises(ConfigError):
        TaskSpec(TaskKind.COPY, span=6, seq_len=10)
    with pytest.raises(ConfigError):
        gen_task(t, 0)


def test_train_no_op_and_zero_lr():
    cfg = ModelConfig(dim=8, n_heads=2, n_kv_heads=2, ffn_dim=8)
    w = init_model(cfg, 0)
    t = TaskSpec(TaskKind.COPY)
    w0, losses = train(cfg, w, t, TrainConfig(steps=0))
    assert losses == [] and all(np.array_equal(w0[k], w[k]) for k in w)
    w1, _ = train(cfg, w, t, TrainConfig(steps=1, lr=1e-300, optimizer="sgd"))
    b = gen_task(t, 16)
    assert loss(cfg, w1, b) == pytest.approx(loss(cfg, w, b), rel=1e-12)


def test_seeds_differ():
    cfg = ModelConfig(dim=8, n_heads=2, n_kv_heads=2, ffn_dim=8)
    w = init_model(cfg, 0)
    t = TaskSpec(TaskKind.COPY)
    a, _ = train(cfg, w, t, TrainConfig(steps=3, seed=1))
    b, _ = train(cfg, w, t, TrainConfig(steps=3, seed=2))
    assert not np.array_equal(a["head.w"], b["head.w"])


def test_untrained_accuracy_near_chance():
    cfg = ModelConfig()
    t = TaskSpec(TaskKind.MOD_ADD, modulus=7)
    acc = accuracy(cfg, init_model(cfg, 0), t, n=2000)
    assert acc <= 1 / 7 + 0.1
    assert accuracy(cfg, init_model(cfg, 0), t, n=1) in (0.0, 1.0)


@pytest.mark.slow
def test_copy_training_baseline():
    cfg = ModelConfig()
    t = TaskSpec(TaskKind.COPY)
    w, losses = train(cfg, init_model(cfg, 0), t, TrainConfig(steps=500))
    assert np.mean(losses[-10:]) < 0.1 * losses[0]
    assert accuracy(cfg, w, t) >= 0.95
