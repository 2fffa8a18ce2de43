import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import matmul_loops
from rpe.adapters import (
    AdapterDelta,
    BaseParameters,
    LowRankPair,
    apply,
    materialize,
    negate,
    weighted_sum,
)
from rpe.errors import ShapeError, StructureError


def random_delta(rng, shapes=(("a", (3, 4)), ("b", (5,)))):
    return AdapterDelta({name: rng.standard_normal(shape) for name, shape in shapes})


def test_materialize_dense_is_identity():
    d = AdapterDelta({"p": [[1.0, 2.0], [3.0, 4.0]]})
    out = materialize(d)
    assert list(out) == ["p"]
    np.testing.assert_array_equal(out["p"], d["p"])


def test_materialize_rank_one_outer_product():
    d = AdapterDelta({"p": LowRankPair(up=[[1.0], [2.0]], down=[[3.0, 4.0]])})
    np.testing.assert_array_equal(materialize(d)["p"], [[3.0, 4.0], [6.0, 8.0]])


def test_materialize_matches_loop_matmul():
    rng = np.random.default_rng(7)
    up, down = rng.standard_normal((4, 2)), rng.standard_normal((2, 4))
    d = AdapterDelta({"q": LowRankPair(up=up, down=down), "dense": np.ones(3)})
    out = materialize(d)
    assert list(out) == ["q", "dense"]
    np.testing.assert_allclose(out["q"], matmul_loops(up, down), rtol=0, atol=1e-12)


def test_lowrank_inner_dimension_mismatch_names_parameter():
    pair = LowRankPair(up=np.ones((3, 2)), down=np.ones((3, 4)))
    with pytest.raises(ShapeError, match="layer.0"):
        AdapterDelta({"layer.0": pair})


def test_tensor_rejects_nan():
    with pytest.raises(ValueError):
        AdapterDelta({"p": [1.0, np.nan]})


def test_containers_are_immutable():
    d = AdapterDelta({"p": [1.0, 2.0]})
    with pytest.raises(ValueError):
        d["p"][0] = 5.0
    with pytest.raises(TypeError):
        d["q"] = np.ones(2)


def test_weighted_sum_single_identity():
    rng = np.random.default_rng(0)
    d = AdapterDelta({"p": LowRankPair(up=rng.standard_normal((3, 1)), down=rng.standard_normal((1, 2)))})
    out = weighted_sum([d], [1.0])
    np.testing.assert_array_equal(out["p"], materialize(d)["p"])


def test_weighted_sum_convex_fixed_point():
    rng = np.random.default_rng(1)
    d = random_delta(rng)
    out = weighted_sum([d, d], [0.5, 0.5])
    for name in d:
        np.testing.assert_allclose(out[name], d[name], rtol=0, atol=1e-15)


def test_weighted_sum_against_elementwise_loop():
    rng = np.random.default_rng(2)
    a, b = random_delta(rng), random_delta(rng)
    out = weighted_sum([a, b], [2.0, -1.0])
    for name in a:
        flat_a, flat_b = a[name].ravel(), b[name].ravel()
        expect = np.array([2.0 * x - y for x, y in zip(flat_a, flat_b)]).reshape(a[name].shape)
        np.testing.assert_allclose(out[name], expect, rtol=0, atol=1e-14)


def test_weighted_sum_key_mismatch_lists_names():
    a = AdapterDelta({"x": np.ones(2), "y": np.ones(2)})
    b = AdapterDelta({"x": np.ones(2), "z": np.ones(2)})
    with pytest.raises(StructureError) as exc:
        weighted_sum([a, b], [0.5, 0.5])
    assert exc.value.missing == ("y",)
    assert exc.value.extra == ("z",)


def test_weighted_sum_shape_mismatch():
    a = AdapterDelta({"x": np.ones(2)})
    b = AdapterDelta({"x": np.ones(3)})
    with pytest.raises(ShapeError):
        weighted_sum([a, b], [0.5, 0.5])


def test_weighted_sum_length_mismatch():
    a = AdapterDelta({"x": np.ones(2)})
    with pytest.raises(ShapeError):
        weighted_sum([a, a], [1.0])
    with pytest.raises(ShapeError):
        weighted_sum([], [])


def test_apply_examples():
    base = BaseParameters({"p": [1.0, 2.0], "q": [[0.5]]})
    out = apply(base, AdapterDelta({"p": [10.0, 20.0]}))
    np.testing.assert_array_equal(out["p"], [11.0, 22.0])
    np.testing.assert_array_equal(out["q"], [[0.5]])
    zero = apply(base, AdapterDelta({"p": [0.0, 0.0], "q": [[0.0]]}))
    for name in base:
        np.testing.assert_array_equal(zero[name], base[name])


def test_apply_then_negate_restores_base():
    rng = np.random.default_rng(3)
    base = BaseParameters({"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5)})
    d = random_delta(rng)
    back = apply(apply(base, d), negate(d))
    for name in base:
        np.testing.assert_allclose(back[name], base[name], rtol=0, atol=1e-12)


def test_apply_shape_and_key_errors():
    base = BaseParameters({"p": [1.0, 2.0]})
    with pytest.raises(ShapeError):
        apply(base, AdapterDelta({"p": [1.0, 2.0, 3.0]}))
    with pytest.raises(StructureError):
        apply(base, AdapterDelta({"other": [1.0]}))


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n=st.integers(1, 5),
    alpha=st.floats(-3, 3),
    beta=st.floats(-3, 3),
)
def test_weighted_sum_is_linear_in_weights(seed, n, alpha, beta):
    rng = np.random.default_rng(seed)
    deltas = [random_delta(rng) for _ in range(n)]
    u, v = rng.standard_normal(n), rng.standard_normal(n)
    lhs = weighted_sum(deltas, alpha * u + beta * v)
    ru, rv = weighted_sum(deltas, u), weighted_sum(deltas, v)
    for name in lhs:
        np.testing.assert_allclose(lhs[name], alpha * ru[name] + beta * rv[name], rtol=0, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 6))
def test_weighted_sum_permutation_bit_identical_with_ids(seed, n):
    rng = np.random.default_rng(seed)
    deltas = [random_delta(rng) for _ in range(n)]
    weights = rng.standard_normal(n)
    ids = [f"id-{i}" for i in range(n)]
    perm = rng.permutation(n)
    a = weighted_sum(deltas, weights, ids)
    b = weighted_sum([deltas[i] for i in perm], weights[perm], [ids[i] for i in perm])
    for name in a:
        assert np.array_equal(a[name], b[name])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 4), rank=st.integers(1, 3))
def test_materialize_commutes_with_weighted_sum(seed, n, rank):
    rng = np.random.default_rng(seed)
    deltas = [
        AdapterDelta({"w": LowRankPair(up=rng.standard_normal((4, rank)), down=rng.standard_normal((rank, 3)))})
        for _ in range(n)
    ]
    w = rng.standard_normal(n)
    merged = weighted_sum(deltas, w)
    separate = weighted_sum([materialize(d) for d in deltas], w)
    np.testing.assert_allclose(merged["w"], separate["w"], rtol=0, atol=1e-10)
    assert merged.is_dense
