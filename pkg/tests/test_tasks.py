import numpy as np
import pytest

from mergebarrier.errors import ConfigError, TrainingError
from mergebarrier.model import ModelConfig, init_model
from mergebarrier.tasks import TaskKind, TaskSpec, concat, gen_task, mod_add_batch, specials
from mergebarrier.training import TrainConfig, accuracy, batch_accuracy, train


def test_special_tokens_sit_at_the_top():
    sp = specials(24)
    assert sorted(sp.values()) == list(range(18, 24))
    assert sp["PAD"] == 23


def test_mod_add_layout():
    t = TaskSpec(TaskKind.MOD_ADD, offset=2)
    b = mod_add_batch(t, [(3, 4), (12, 12)])
    sp = specials(t.vocab)
    assert b.tokens[0, :4].tolist() == [sp["ADD"], 3, 4, sp["EQ"]]
    assert b.targets[0, 3] == 9 and b.targets[1, 3] == (12 + 12 + 2) % 13
    assert b.loss_mask.sum(axis=1).tolist() == [1, 1]


@pytest.mark.parametrize("kind", [TaskKind.COPY, TaskKind.REVERSE])
def test_sequence_layouts(kind):
    t = TaskSpec(kind, span=3, offset=1)
    b = gen_task(t, 5)
    sp = specials(t.vocab)
    seq = np.concatenate([b.tokens[:, :1], b.targets], axis=1)
    xs, ys = seq[:, 1:4], seq[:, 5:8]
    want = (xs + 1) % t.n_symbols
    assert np.array_equal(ys, want if kind is TaskKind.COPY else want[:, ::-1])
    assert np.all(seq[:, 4] == sp["SEP"])
    assert np.all(b.loss_mask[:, 4:7]) and b.loss_mask.sum() == 15


def test_marker_replaces_leading_token():
    b = gen_task(TaskSpec(TaskKind.COPY, marker=14), 4)
    assert np.all(b.tokens[:, 0] == 14)
    plain = gen_task(TaskSpec(TaskKind.COPY), 4)
    assert np.array_equal(b.targets, plain.targets)
    with pytest.raises(ConfigError):
        TaskSpec(marker=24)


def test_streams_are_deterministic_and_distinct():
    t = TaskSpec(seed=3)
    a, b = gen_task(t, 50, "train"), gen_task(t, 50, "train")
    assert np.array_equal(a.tokens, b.tokens)
    assert not np.array_equal(a.tokens, gen_task(t, 50, "eval").tokens)
    assert not np.array_equal(a.tokens, gen_task(t.with_seed(4), 50, "train").tokens)


def test_chance_and_validation():
    assert TaskSpec().chance == pytest.approx(1 / 13)
    assert TaskSpec(TaskKind.COPY).chance == pytest.approx(1 / 10)
    for kw in ({"modulus": 1}, {"modulus": 19}, {"task": "copy", "span": 5}, {"task": "copy", "n_symbols": 0}):
        with pytest.raises(ConfigError):
            TaskSpec(**kw)
    with pytest.raises(ConfigError):
        gen_task(TaskSpec(), 0)


def test_concat():
    t = TaskSpec()
    b = concat([gen_task(t, 3), gen_task(t, 2, "eval")])
    assert b.tokens.shape == (5, t.seq_len)


@pytest.fixture
def tiny():
    return ModelConfig(vocab=24, dim=16, n_layers=1, n_heads=2, n_kv_heads=1, ffn_dim=16, seq_len=10)


def test_training_reduces_loss_and_is_deterministic(tiny):
    task = TaskSpec(TaskKind.COPY, span=2, n_symbols=4)
    w0 = init_model(tiny, 0)
    tc = TrainConfig(steps=60, lr=1e-2, batch_size=32)
    w1, losses = train(tiny, w0, task, tc)
    assert np.mean(losses[-10:]) < 0.8 * np.mean(losses[:10])
    w2, losses2 = train(tiny, w0, task, tc)
    assert losses == losses2 and all(np.array_equal(w1[k], w2[k]) for k in w1)
    assert all(np.array_equal(w0[k], init_model(tiny, 0)[k]) for k in w0)


def test_freeze_decay_and_early_stop(tiny):
    task = TaskSpec(TaskKind.COPY, span=2, n_symbols=4)
    w0 = init_model(tiny, 0)
    tc = TrainConfig(steps=5, lr=1e-2, optimizer="sgd", freeze=("embed.",), weight_decay=0.5,
                     decay_only=("ffn.w1",))
    w1, _ = train(tiny, w0, task, tc)
    assert np.array_equal(w1["embed.tok"], w0["embed.tok"])
    seen = []
    w2, losses = train(tiny, w0, task, TrainConfig(steps=50), callback=lambda s, w: seen.append(s) or s == 3)
    assert len(losses) == 3 and seen == [0, 1, 2, 3]


def test_fixed_pool_training_and_accuracy(tiny):
    task = TaskSpec(TaskKind.COPY, span=2, n_symbols=4)
    pool = gen_task(task, 8, "pool")
    w, losses = train(tiny, init_model(tiny, 1), task, TrainConfig(steps=3, batch_size=4), data=pool)
    assert len(losses) == 3
    acc = accuracy(tiny, w, task, 32)
    assert 0.0 <= acc <= 1.0 and acc == batch_accuracy(tiny, w, gen_task(task, 32, "eval"))


def test_non_finite_loss_raises(tiny):
    task = TaskSpec(TaskKind.COPY, span=2, n_symbols=4)
    w = init_model(tiny, 0)
    w["head.w"][0, 0] = np.nan
    with pytest.raises(TrainingError):
        train(tiny, w, task, TrainConfig(steps=5))
    for kw in ({"lr": 0}, {"steps": -1}, {"batch_size": 0}, {"weight_decay": -1}):
        with pytest.raises(Exception):
            TrainConfig(**kw)
