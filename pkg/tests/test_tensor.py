"""Tensor container, tape recording, and backward accumulation semantics."""

import numpy as np
import pytest

from prnet import ops
from prnet.tensor import (
    NonFiniteError,
    Tensor,
    as_tensor,
    backward,
    leaves,
    no_grad,
    use_dtype,
)


def test_construction_defaults_to_float32():
    t = Tensor([1.0, 2.0, 3.0])
    assert t.dtype == np.float32
    assert t.shape == (3,)
    assert not t.requires_grad
    assert t.grad is None


def test_use_dtype_switches_construction_dtype():
    with use_dtype(np.float64):
        t = Tensor([1.0])
        assert t.dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_use_dtype_restores_on_exception():
    with pytest.raises(RuntimeError):
        with use_dtype(np.float64):
            raise RuntimeError("boom")
    assert Tensor([1.0]).dtype == np.float32


def test_scalar_item_and_size():
    t = Tensor(3.5)
    assert t.item() == pytest.approx(3.5)
    assert t.size == 1
    assert t.ndim == 0


def test_arithmetic_sugar_values():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 5.0])
    np.testing.assert_allclose((a + b).data, [4.0, 7.0])
    np.testing.assert_allclose((a - b).data, [-2.0, -3.0])
    np.testing.assert_allclose((a * b).data, [3.0, 10.0])
    np.testing.assert_allclose((a / b).data, [1 / 3, 2 / 5], rtol=1e-6)
    np.testing.assert_allclose((-a).data, [-1.0, -2.0])
    np.testing.assert_allclose((2.0 + a).data, [3.0, 4.0])
    np.testing.assert_allclose((2.0 - a).data, [1.0, 0.0])
    np.testing.assert_allclose((2.0 * a).data, [2.0, 4.0])
    np.testing.assert_allclose((2.0 / a).data, [2.0, 1.0])


def test_backward_sum_of_squares_gives_two_x():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    loss = ops.sum_over(x * x)
    loss.backward()
    np.testing.assert_allclose(x.grad, 2.0 * x.data, rtol=1e-6)


def test_backward_diamond_graph():
    # z = x*y + x; dz/dx = y + 1, dz/dy = x even though x feeds two paths.
    x = Tensor(2.0, requires_grad=True)
    y = Tensor(5.0, requires_grad=True)
    z = x * y + x
    z.backward()
    assert x.grad == pytest.approx(6.0)
    assert y.grad == pytest.approx(2.0)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    with pytest.raises(ValueError, match="scalar"):
        y.backward()


def test_grad_accumulates_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ops.sum_over(x * x).backward()
    first = x.grad.copy()
    ops.sum_over(x * x).backward()
    np.testing.assert_allclose(x.grad, 2.0 * first)
    x.zero_grad()
    assert x.grad is None


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = x * x
    assert y.node is None
    assert not y.requires_grad
    # A scalar with no tape reaches no leaves; x stays untouched.
    backward(ops.sum_over(y))
    assert x.grad is None


def test_no_grad_restores_recording():
    x = Tensor(2.0, requires_grad=True)
    with no_grad():
        pass
    (x * x).backward()
    assert x.grad == pytest.approx(4.0)


def test_constants_do_not_collect_grads():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    ops.sum_over(x * c).backward()
    np.testing.assert_allclose(x.grad, c.data)
    assert c.grad is None


def test_detach_cuts_the_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).detach()
    assert y.node is None
    ops.sum_over(y * x).backward()
    # Only the direct x factor contributes: d/dx of sum(const * x) = const.
    np.testing.assert_allclose(x.grad, y.data)


def test_shared_subexpression_counted_once_per_use():
    x = Tensor(3.0, requires_grad=True)
    s = x * x
    z = s + s
    z.backward()
    assert x.grad == pytest.approx(12.0)


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 3, 3, 3)), requires_grad=True)
        loss = ops.sum_over(ops.sigmoid(ops.conv2d(x, w, padding=1)))
        loss.backward()
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = run()
    gx2, gw2 = run()
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_non_finite_result_raises():
    x = Tensor([1.0, 0.0])
    with np.errstate(divide="ignore"), pytest.raises(NonFiniteError):
        ops.div(Tensor([1.0, 1.0]), x)


def test_as_tensor_wraps_scalars_with_like_dtype():
    with use_dtype(np.float64):
        anchor = Tensor([1.0])
    t = as_tensor(0.5, like=anchor)
    assert t.dtype == np.float64
    assert t.data == pytest.approx(0.5)
    same = as_tensor(anchor)
    assert same is anchor


def test_leaves_filters_to_requiring_roots():
    x = Tensor([1.0], requires_grad=True)
    c = Tensor([2.0])
    y = x * c
    assert leaves([x, c, y]) == [x]
