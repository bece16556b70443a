import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mergebarrier.errors import ParameterError, SchemaError
from mergebarrier.merge import (
    MergeConfig, MergeMethod, TaskVectorSet, dare_preprocess, merge, merge_models, merge_report,
    merge_task_arithmetic, task_vector, task_vectors, ties_combine, ties_merge, trim,
)


def toy(rng, shape=(3, 4)):
    return {"a": rng.normal(size=shape), "b": rng.normal(size=(5,))}


def grid_toy(rng, shape=(3, 4)):
    """Values on a dyadic grid, where differences and sums are exact."""
    return {k: np.round(v * 1024) / 1024 for k, v in toy(rng, shape).items()}


def test_task_vector_identity_and_inverse(rng):
    base, ex = grid_toy(rng), grid_toy(rng)
    assert all(np.all(v == 0) for v in task_vector(base, base).values())
    d = task_vector(base, ex)
    assert all(np.array_equal(base[k] + d[k], ex[k]) for k in base)
    base, ex = toy(rng), toy(rng)
    d = task_vector(base, ex)
    assert all(np.allclose(base[k] + d[k], ex[k], rtol=0, atol=4 * np.finfo(float).eps * 8) for k in base)


def test_task_vector_schema_errors(rng):
    base = toy(rng)
    with pytest.raises(SchemaError) as e:
        task_vector(base, {**base, "extra": np.zeros(2)})
    assert "extra" in str(e.value) and e.value.names == ["extra"]
    with pytest.raises(SchemaError):
        task_vector(base, {**base, "a": np.zeros((4, 3))})


def test_task_arithmetic_cases(rng):
    base, ex = grid_toy(rng), grid_toy(rng)
    one = merge_models(base, [ex], MergeConfig(lam=1.0))
    assert all(np.array_equal(one[k], ex[k]) for k in base)
    zero = merge_models(base, [ex], MergeConfig(lam=0.0))
    assert all(np.array_equal(zero[k], base[k]) for k in base)
    tv = TaskVectorSet({"s": np.zeros(1)}, [{"s": np.array([2.0])}, {"s": np.array([4.0])}])
    assert merge_task_arithmetic(tv, MergeConfig(lam=0.5))["s"][0] == 3.0
    with pytest.raises(ParameterError):
        merge_task_arithmetic(TaskVectorSet(base, []), MergeConfig())


def test_task_arithmetic_linearity():
    base = {"x": np.array([0.0, 1.0])}
    tv = TaskVectorSet(base, [{"x": np.array([0.5, -0.25])}, {"x": np.array([0.125, 2.0])}])
    m1 = merge_task_arithmetic(tv, MergeConfig(lam=0.25))["x"]
    m2 = merge_task_arithmetic(tv, MergeConfig(lam=0.5))["x"]
    m3 = merge_task_arithmetic(tv, MergeConfig(lam=0.75))["x"]
    assert np.array_equal(m1 + m2 - 2 * base["x"], m3 - base["x"])


def test_trim_examples():
    x = np.array([5.0, -4.0, 1.0, 0.5, -0.1])
    assert np.array_equal(trim(x, 0.2), [5.0, 0, 0, 0, 0])
    assert np.array_equal(trim(x, 1.0), x)
    assert np.array_equal(trim(np.array([1.0, -1.0, 1.0]), 0.3), [1.0, 0.0, 0.0])


def test_ties_tie_breaks_positive():
    assert ties_combine([np.array([2.0]), np.array([-2.0])])[0] == 2.0
    assert ties_combine([np.array([3.0]), np.array([-1.0]), np.array([1.0])])[0] == 2.0
    assert ties_combine([np.array([0.0]), np.array([0.0])])[0] == 0.0


def test_ties_unanimity(rng):
    base, ex = toy(rng), toy(rng)
    d = task_vector(base, ex)
    tv = TaskVectorSet(base, [d, d])
    out = ties_merge(tv, MergeConfig(method="ties", lam=0.7, trim_keep_fraction=1.0))
    assert all(np.allclose(out[k], base[k] + 0.7 * d[k], rtol=0, atol=1e-15) for k in base)


def test_ties_single_equals_task_arithmetic(rng):
    base, ex = toy(rng), toy(rng)
    tv = task_vectors(base, [ex])
    a = ties_merge(tv, MergeConfig(method="ties", lam=0.3, trim_keep_fraction=1.0))
    b = merge_task_arithmetic(tv, MergeConfig(lam=0.3))
    assert all(np.array_equal(a[k], b[k]) for k in base)


def test_dare_identity_and_determinism(rng):
    d = toy(rng)
    out = dare_preprocess(d, MergeConfig(drop_rate=0.0))
    assert all(np.array_equal(out[k], d[k]) for k in d)
    a = dare_preprocess(d, MergeConfig(drop_rate=0.5, seed=3))
    b = dare_preprocess(d, MergeConfig(drop_rate=0.5, seed=3))
    assert all(np.array_equal(a[k], b[k]) for k in d)
    surv = a["a"] != 0
    assert np.allclose(a["a"][surv], 2 * d["a"][surv])


def test_dare_unbiased():
    delta = {"w": np.random.default_rng(1).normal(size=(10, 10)) + 3.0}
    acc = np.zeros((10, 10))
    for seed in range(10_000):
        acc += dare_preprocess(delta, MergeConfig(drop_rate=0.5, seed=seed))["w"]
    mean = acc / 10_000
    assert np.linalg.norm(mean - delta["w"]) / np.linalg.norm(delta["w"]) < 0.02


def test_drop_rate_bounds():
    with pytest.raises(ParameterError, match="drop rate must be < 1"):
        MergeConfig(drop_rate=1.0)
    with pytest.raises(ParameterError):
        MergeConfig(trim_keep_fraction=0.0)
    with pytest.raises(ParameterError):
        MergeConfig(lam=float("nan"))


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(list(MergeMethod)), st.integers(0, 1000))
def test_merges_preserve_schema_and_are_deterministic(method, seed):
    rng = np.random.default_rng(seed)
    base, a, b = toy(rng), toy(rng), toy(rng)
    mc = MergeConfig(method=method, lam=0.5, seed=seed)
    one = merge(task_vectors(base, [a, b]), mc)
    two = merge(task_vectors(base, [a, b]), mc)
    assert list(one) == sorted(base)
    assert all(one[k].shape == base[k].shape and np.array_equal(one[k], two[k]) for k in base)


def test_report(rng):
    base, a = toy(rng), toy(rng)
    rep = merge_report(task_vectors(base, [a]), MergeConfig(method="dare_ties", drop_rate=0.5))
    assert rep["config"]["method"] == "dare_ties"
    assert set(rep["sparsity"]) == set(base)
    assert all(0.0 <= f <= 1.0 for fs in rep["sparsity"].values() for f in fs)
