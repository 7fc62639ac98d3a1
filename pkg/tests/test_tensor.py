from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taco import tensor as T
from taco.errors import ShapeError
from taco.tensor import Tensor

floats = st.floats(-3, 3, allow_nan=False, width=64)


def leaf(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True)


def check_grads(fn, *params, tol=1e-6, h=1e-5):
    loss = fn()
    grads = T.backward(loss, params)
    for p in params:
        num = T.numeric_grad(fn, p, h)
        np.testing.assert_allclose(grads[p], num, rtol=tol, atol=tol)


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: T.add(a, b),
        lambda a, b: T.sub(a, b),
        lambda a, b: T.mul(a, b),
    ],
)
def test_binary_broadcast_grads(op):
    a, b = leaf((3, 4), 1), leaf((4,), 2)
    check_grads(lambda: T.sum_(T.mul(op(a, b), op(a, b))), a, b)


def test_matmul_grads_batched_and_weight():
    a, b, w = leaf((2, 3, 4), 1), leaf((2, 4, 5), 2), leaf((5, 2), 3)
    check_grads(lambda: T.sum_(T.tanh(T.matmul(T.matmul(a, b), w))), a, b, w)


def test_unary_grads():
    x = leaf((3, 5), 4)
    for f in (T.softmax, T.layer_norm, T.gelu, T.tanh):
        check_grads(lambda f=f: T.sum_(T.mul(f(x), np.arange(15.0).reshape(3, 5))), x)


def test_structural_grads():
    x = leaf((4, 3, 2), 5)
    w = np.random.default_rng(0).normal(size=(3, 4, 2))
    check_grads(lambda: T.sum_(T.mul(T.transpose(x, (1, 0, 2)), w)), x)
    check_grads(lambda: T.sum_(T.mul(T.reshape(x, (6, 4)), w.reshape(6, 4))), x)
    check_grads(lambda: T.sum_(T.mul(T.concat([x, x], axis=1), np.ones((4, 6, 2)) * 2)), x)
    check_grads(lambda: T.sum_(T.mul(T.slice_(x, (slice(1, 3), 0)), w[0, :2])), x)
    check_grads(lambda: T.sum_(T.mul(T.slice_(x, np.array([0, 0, 3])), 1.5)), x)
    check_grads(lambda: T.mean(T.sum_(x, axis=1)), x)


def test_embedding_and_cross_entropy_grads():
    table = leaf((5, 3), 6)
    idx = np.array([[0, 4], [4, 2]])
    labels = np.array([1, 0, 2, 2])
    check_grads(lambda: T.cross_entropy(T.reshape(T.embedding(table, idx), (4, 3)), labels), table)


def test_cross_entropy_value_matches_direct_formula():
    z = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    y = np.array([1, 2])
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    assert float(T.cross_entropy(z, y).data) == pytest.approx(-np.log(p[[0, 1], y]).mean(), rel=1e-14)


@given(arrays(np.float64, (3, 4), elements=floats))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax(x).data
    np.testing.assert_allclose(y.sum(-1), 1.0, rtol=1e-12)
    assert (y >= 0).all()


@given(arrays(np.float64, (2, 6), elements=floats), floats)
def test_layer_norm_is_shift_invariant(x, c):
    np.testing.assert_allclose(T.layer_norm(x).data, T.layer_norm(x + c).data, atol=1e-6)


def test_shared_subexpression_accumulates():
    x = leaf((3,), 7)
    y = T.mul(x, x)
    g = T.backward(T.sum_(T.add(y, y)), [x])[x]
    np.testing.assert_allclose(g, 4 * x.data)


def test_unreached_params_get_zero_grad_and_no_grad_records_nothing():
    x, z = leaf((2,), 1), leaf((2,), 2)
    g = T.backward(T.sum_(x), [x, z])
    assert np.array_equal(g[z], np.zeros(2))
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_deep_graph_backward_is_iterative():
    x = leaf((2,), 0)
    y = x
    for _ in range(5000):
        y = T.add(y, 1.0)
    assert np.array_equal(T.backward(T.sum_(y), [x])[x], np.ones(2))


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        T.add(np.ones((2, 3)), np.ones((4,)))
    with pytest.raises(ShapeError):
        T.embedding(np.ones((3, 2)), np.array([3]))
    with pytest.raises(ShapeError):
        T.backward(Tensor(np.ones(3), requires_grad=True))
    with pytest.raises(ShapeError):
        T.cross_entropy(np.ones((2, 3)), np.array([0, 3]))


def test_flop_counter_scopes_and_nesting():
    a, b = np.ones((4, 3)), np.ones((3, 5))
    with T.count_flops() as outer:
        with T.flop_scope("x"):
            T.matmul(a, b)
        with T.count_flops() as inner:
            T.matmul(a, b)
    assert outer.get("x") == 60 and outer.total == 120
    assert inner.total == 60 and inner.get("x") == 0


def test_peak_memory_probe_sees_numpy_buffers():
    with T.measure_peak_bytes() as rec:
        buf = np.ones(1_000_000)
        del buf
    assert 8_000_000 <= rec.peak_bytes < 9_000_000


def test_grad_check_reports_frozen_as_zero_and_catches_bad_grads():
    w = leaf((3,), 1)
    frozen = Tensor(np.ones(3))
    rep = T.grad_check(lambda: T.sum_(T.mul(T.tanh(w), frozen)), {"w": w, "f": frozen}, h=1e-5)
    assert rep.passed(1e-6) and rep.max_rel_error["f"] == 0.0

    def squared_with_wrong_backward():
        # forward w*w, but the recorded derivative is 1 instead of 2w
        return T.sum_(T._make(w.data * w.data, (w,), lambda g: (g,), "bad"))

    assert not T.grad_check(squared_with_wrong_backward, {"w": w}, h=1e-5).passed(1e-3)


def test_relative_error_floor():
    a, b = np.array([1e-6, 1.0]), np.array([2e-6, 1.0])
    assert T.relative_error(a, b)[0] == pytest.approx(0.5)
    assert T.relative_error(a, b, floor=1e-3)[0] == pytest.approx(1e-3)
