"""Tape autodiff: forward values and gradients against finite differences."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentscout.nn import autodiff as ad
from latentscout.nn.autodiff import Tensor, backward
from latentscout.nn.optim import Parameter, zero_grads

from helpers import check_gradients


def test_sigmoid_symmetry_point() -> None:
    assert float(ad.sigmoid(Tensor(np.array([0.0]))).data[0]) == 0.5


def test_sigmoid_at_one() -> None:
    value = float(ad.sigmoid(Tensor(np.array([1.0]))).data[0])
    assert value == pytest.approx(0.7310585786300049, abs=1e-15)


def test_sigmoid_saturates() -> None:
    # sigmoid(50) differs from 1 by ~2e-22, below float64 resolution, so the
    # representable value is exactly 1.0; a nearby input keeps the strict gap.
    assert float(ad.sigmoid(Tensor(np.array([50.0]))).data[0]) == \
        pytest.approx(1.0, abs=1e-9)
    value = float(ad.sigmoid(Tensor(np.array([21.0]))).data[0])
    assert 1.0 - 1e-9 < value < 1.0


def test_sum_sigmoid_gradient_at_zero() -> None:
    """d/dx sigmoid(x) at 0 is exactly 1/4, elementwise."""
    x = Parameter(np.zeros(5))
    loss = ad.sum_all(ad.sigmoid(x.tensor()))
    backward(loss)
    np.testing.assert_allclose(x.grad, 0.25, atol=1e-15)


def test_constant_loss_zero_gradient() -> None:
    w = Parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
    loss = ad.mul(ad.sum_all(ad.mul(w.tensor(), 0.0)), 1.0)
    backward(loss)
    np.testing.assert_array_equal(w.grad, np.zeros((2, 2)))


def test_squared_norm_gradient_matches_finite_differences() -> None:
    rng = np.random.default_rng(3)
    w = Parameter(rng.normal(size=(4, 3)))
    x = rng.normal(size=3)

    def loss():
        y = ad.matmul(w.tensor(), Tensor(x))
        return ad.sum_all(ad.mul(y, y))

    check_gradients(loss, [w])


@pytest.mark.parametrize("shape_a,shape_b", [((2, 3), (3,)), ((3,), (3, 4)),
                                             ((2, 3), (3, 4))])
def test_matmul_gradients(shape_a: tuple, shape_b: tuple) -> None:
    rng = np.random.default_rng(hash(shape_a + shape_b) % 2**31)
    a = Parameter(rng.normal(size=shape_a))
    b = Parameter(rng.normal(size=shape_b))

    def loss():
        return ad.sum_all(ad.matmul(a.tensor(), b.tensor()))

    check_gradients(loss, [a, b])


def test_broadcast_add_gradient() -> None:
    """Adding a row vector to a matrix collapses the gradient correctly."""
    rng = np.random.default_rng(11)
    m = Parameter(rng.normal(size=(3, 4)))
    row = Parameter(rng.normal(size=4))

    def loss():
        return ad.sum_all(ad.mul(ad.add(m.tensor(), row.tensor()),
                                 ad.add(m.tensor(), row.tensor())))

    check_gradients(loss, [m, row])


@pytest.mark.parametrize("op", [ad.tanh, ad.sigmoid])
def test_elementwise_gradients(op) -> None:
    rng = np.random.default_rng(17)
    x = Parameter(rng.normal(size=(2, 3)))

    def loss():
        return ad.sum_all(ad.mul(op(x.tensor()), op(x.tensor())))

    check_gradients(loss, [x])


def test_structural_op_gradients() -> None:
    """stack_rows, row, concat, hcat, col_slice, transpose, mean_rows."""
    rng = np.random.default_rng(23)
    a = Parameter(rng.normal(size=4))
    b = Parameter(rng.normal(size=4))
    m = Parameter(rng.normal(size=(3, 4)))

    def loss():
        stacked = ad.stack_rows([a.tensor(), b.tensor()])
        merged = ad.hcat([stacked, ad.transpose(ad.col_slice(
            ad.transpose(m.tensor()), 0, 2))])
        pooled = ad.mean_rows(merged)
        first = ad.row(merged, 0)
        flat = ad.concat([pooled, first])
        return ad.sum_all(ad.mul(flat, flat))

    check_gradients(loss, [a, b, m])


def test_mean_all_and_dot() -> None:
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    assert float(ad.mean_all(x).data) == pytest.approx(2.0)
    y = Tensor(np.array([2.0, 0.0, -1.0]))
    assert float(ad.dot(x, y).data) == pytest.approx(-1.0)


def test_row_softmax_gradient() -> None:
    rng = np.random.default_rng(29)
    x = Parameter(rng.normal(size=(3, 4)))
    probe = rng.normal(size=(3, 4))

    def loss():
        return ad.sum_all(ad.mul(ad.row_softmax(x.tensor()), Tensor(probe)))

    check_gradients(loss, [x])


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=1, max_value=6),
       st.integers(min_value=0, max_value=2**31 - 1))
def test_row_softmax_rows_are_distributions(n: int, m: int, seed: int) -> None:
    rng = np.random.default_rng(seed)
    out = ad.row_softmax(Tensor(rng.uniform(-30, 30, size=(n, m)))).data
    assert np.all(out >= 0.0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


def test_gradient_accumulates_until_reset() -> None:
    p = Parameter(np.array([2.0]))
    for _ in range(2):
        backward(ad.sum_all(ad.mul(p.tensor(), p.tensor())))
    np.testing.assert_allclose(p.grad, np.array([8.0]))
    zero_grads([p])
    np.testing.assert_array_equal(p.grad, np.array([0.0]))


def test_backward_handles_deep_chains() -> None:
    """The traversal is iterative, so long chains must not hit the
    interpreter recursion limit."""
    p = Parameter(np.array([0.001]))
    node = p.tensor()
    for _ in range(5000):
        node = ad.add(node, 1e-6)
    backward(ad.sum_all(node))
    np.testing.assert_allclose(p.grad, np.array([1.0]))


def test_frozen_leaf_blocks_gradient() -> None:
    p = Parameter(np.array([3.0]))
    loss = ad.sum_all(ad.mul(p.frozen(), p.frozen()))
    backward(loss)
    np.testing.assert_array_equal(p.grad, np.array([0.0]))
