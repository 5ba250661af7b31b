"""Elementwise/reduction ops, tape mechanics, and their backward rules."""

import numpy as np
import pytest

from myoseg.autodiff import (
    GradError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    clamped_log,
    concat_channels,
    div,
    leaky_relu,
    mul,
    scale,
    softmax_channels,
    tensor_sum,
)


def test_add_elementwise():
    out = add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_scale_zero():
    out = scale(Tensor([1.0, 2.0]), 0.0)
    np.testing.assert_array_equal(out.data, [0.0, 0.0])


def test_add_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    assert "(2, 3)" in str(exc.value) and "(3, 2)" in str(exc.value)


def test_scalar_broadcast():
    out = add(Tensor([1.0, 2.0]), Tensor(10.0))
    np.testing.assert_array_equal(out.data, [11.0, 12.0])
    a = Tensor([1.0, 2.0], requires_grad=True)
    k = Tensor(3.0, requires_grad=True)
    with Tape():
        loss = tensor_sum(mul(a, k))
        loss.backward()
    np.testing.assert_array_equal(a.grad, [3.0, 3.0])
    np.testing.assert_array_equal(k.grad.reshape(()), 3.0)


def test_grad_of_sum_mul_is_other_factor():
    a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    b = Tensor([4.0, 5.0, 6.0])
    with Tape():
        loss = tensor_sum(mul(a, b))
        loss.backward()
    np.testing.assert_array_equal(a.grad, b.data)
    assert b.grad is None  # requires_grad defaults to False


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4, 5)), requires_grad=True)
    with Tape():
        tensor_sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4, 5)))


def test_backward_quadratic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        tensor_sum(mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = mul(x, x)
        with pytest.raises(GradError):
            backward(y)


def test_backward_requires_tape():
    x = Tensor([1.0], requires_grad=True)
    y = tensor_sum(x)  # no active tape: nothing recorded
    with pytest.raises(GradError):
        y.backward()


def test_repeated_backward_accumulates_on_leaves():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = tensor_sum(mul(x, x))
        loss.backward()
        first = x.grad.copy()
        loss.backward()
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_tape_clear_releases_entries():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        tensor_sum(mul(x, x))
        assert len(tape) == 2
        tape.clear()
        assert len(tape) == 0


def test_div_values_and_grads():
    a = Tensor([6.0, 8.0], requires_grad=True)
    b = Tensor([2.0, 4.0], requires_grad=True)
    with Tape():
        out = div(a, b)
        np.testing.assert_allclose(out.data, [3.0, 2.0])
        tensor_sum(out).backward()
    np.testing.assert_allclose(a.grad, [0.5, 0.25])
    np.testing.assert_allclose(b.grad, [-1.5, -0.5])


def test_clamped_log_floor_and_grad():
    a = Tensor([0.5, 1e-20], requires_grad=True)
    with Tape():
        out = clamped_log(a, 1e-12)
        np.testing.assert_allclose(out.data, [np.log(0.5), np.log(1e-12)])
        tensor_sum(out).backward()
    np.testing.assert_allclose(a.grad, [2.0, 0.0])  # clamped region has zero slope


def test_leaky_relu_branches():
    out = leaky_relu(Tensor([2.0, -1.0, 0.0]), 0.01)
    np.testing.assert_allclose(out.data, [2.0, -0.01, 0.0])


def test_leaky_relu_gradient_negative_branch():
    x = Tensor([-3.0], requires_grad=True)
    with Tape():
        tensor_sum(leaky_relu(x, 0.01)).backward()
    np.testing.assert_allclose(x.grad, [0.01])


def test_leaky_relu_subgradient_at_zero_is_one():
    x = Tensor([0.0], requires_grad=True)
    with Tape():
        tensor_sum(leaky_relu(x, 0.01)).backward()
    np.testing.assert_allclose(x.grad, [1.0])


def _logits(*values) -> Tensor:
    return Tensor(np.array(values).reshape(1, len(values), 1, 1, 1))


def test_softmax_symmetry():
    out = softmax_channels(_logits(0.0, 0.0))
    np.testing.assert_allclose(out.data.ravel(), [0.5, 0.5])


def test_softmax_no_overflow_on_large_logits():
    out = softmax_channels(_logits(1000.0, 1000.0))
    np.testing.assert_allclose(out.data.ravel(), [0.5, 0.5])
    assert np.all(np.isfinite(out.data))


def test_softmax_direct_evaluation():
    out = softmax_channels(_logits(np.log(1.0), np.log(3.0)))
    np.testing.assert_allclose(out.data.ravel(), [0.25, 0.75], atol=1e-12)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 3, 3, 3))
    out = softmax_channels(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    shifted = softmax_channels(Tensor(x + rng.normal(size=(2, 1, 3, 3, 3)))).data
    np.testing.assert_allclose(out, shifted, atol=1e-9)


def test_concat_channels_shapes_and_roundtrip():
    rng = np.random.default_rng(4)
    a = Tensor(rng.normal(size=(1, 2, 4, 4, 4)))
    b = Tensor(rng.normal(size=(1, 3, 4, 4, 4)))
    out = concat_channels(a, b)
    assert out.shape == (1, 5, 4, 4, 4)
    np.testing.assert_array_equal(out.data[:, :2], a.data)
    np.testing.assert_array_equal(out.data[:, 2:], b.data)


def test_concat_channels_spatial_mismatch_names_axis():
    a = Tensor(np.zeros((1, 2, 4, 4, 4)))
    b = Tensor(np.zeros((1, 2, 4, 5, 4)))
    with pytest.raises(ShapeError) as exc:
        concat_channels(a, b)
    assert "axis 3" in str(exc.value)


def test_concat_gradient_splits():
    a = Tensor(np.ones((1, 2, 2, 2, 2)), requires_grad=True)
    b = Tensor(np.ones((1, 3, 2, 2, 2)), requires_grad=True)
    with Tape():
        tensor_sum(concat_channels(a, b)).backward()
    np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
    np.testing.assert_array_equal(b.grad, np.ones_like(b.data))


def test_ops_are_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 4, 4, 4))
    r1 = softmax_channels(Tensor(x)).data
    r2 = softmax_channels(Tensor(x)).data
    np.testing.assert_array_equal(r1, r2)


def test_second_head_on_same_tape_does_not_leak():
    # Two loss heads recorded on one tape: backward on one leaves the other's
    # exclusive subgraph untouched.
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    with Tape():
        loss_x = tensor_sum(mul(x, x))
        tensor_sum(mul(y, y))  # second head, never driven backward
        loss_x.backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    assert y.grad is None


def test_default_dtype_is_float64_and_float32_preserved():
    assert Tensor([1, 2]).dtype == np.float64
    assert Tensor(np.zeros(3, dtype=np.float32)).dtype == np.float32
