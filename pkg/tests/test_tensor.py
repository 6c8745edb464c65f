import math

import numpy as np
import pytest

from treelab import tensor as T
from treelab.errors import ShapeError
from treelab.gradcheck import max_relative_error

RNG = np.random.default_rng(42)


def rand_tensor(*shape, requires_grad=True):
    return T.Tensor(RNG.uniform(-1, 1, shape).astype(np.float32),
                    requires_grad=requires_grad)


# --- matmul -----------------------------------------------------------------

def test_matmul_identity():
    a = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = T.Tensor([[3.0], [4.0]])
    out = T.matmul(a, b)
    assert np.array_equal(out.data, [[3.0], [4.0]])


def test_matmul_zero():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[0.0], [0.0]]))
    assert np.array_equal(out.data, [[0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"3, 4.*5, 2"):
        T.matmul(rand_tensor(3, 4), rand_tensor(5, 2))


def test_matmul_gradient_matches_finite_differences():
    a, b = rand_tensor(3, 4), rand_tensor(4, 2)
    err = max_relative_error(lambda: T.sum_all(T.matmul(a, b)), [a, b])
    assert err < 1e-3


def test_matmul_batched_leading_dims():
    a, b = rand_tensor(2, 3, 5), rand_tensor(5, 4)
    out = T.matmul(a, b)
    assert out.shape == (2, 3, 4)
    expected = a.data.reshape(-1, 5).astype(np.float64) @ b.data.astype(np.float64)
    assert np.allclose(out.data.reshape(-1, 4), expected, atol=1e-5)


# --- elementwise ------------------------------------------------------------

def test_sigmoid_at_zero():
    out = T.sigmoid(T.Tensor([0.0]))
    assert out.data[0] == pytest.approx(0.5)


def test_mul_by_ones_is_identity():
    x = rand_tensor(4, 3)
    out = T.mul(x, T.Tensor(np.ones((4, 3), np.float32)))
    assert np.array_equal(out.data, x.data)


def test_sigmoid_gradient_finite_differences():
    x = T.Tensor(np.array([0.7], np.float32), requires_grad=True)
    err = max_relative_error(lambda: T.sum_all(T.sigmoid(x)), [x])
    assert err < 1e-3


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
def test_elementwise_gradients(op):
    a, b = rand_tensor(2, 5), rand_tensor(2, 5)
    err = max_relative_error(lambda: T.sum_all(op(a, b)), [a, b])
    assert err < 1e-3


def test_broadcast_add_bias_gradient():
    x, bias = rand_tensor(2, 3, 4), rand_tensor(4)
    err = max_relative_error(lambda: T.sum_all(T.add(x, bias)), [x, bias])
    assert err < 1e-3


def test_non_broadcastable_shapes_raise():
    with pytest.raises(ShapeError):
        T.add(rand_tensor(2, 3), rand_tensor(2, 4))


# --- concat / split ---------------------------------------------------------

def test_concat_last_values():
    out = T.concat_last(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0, 4.0]]))
    assert np.array_equal(out.data, [[1.0, 2.0, 3.0, 4.0]])


def test_concat_split_round_trip():
    a, b = rand_tensor(3, 4), rand_tensor(3, 4)
    joined = T.concat_last(a, b)
    assert np.array_equal(joined.data[:, :4], a.data)
    assert np.array_equal(joined.data[:, 4:], b.data)


def test_concat_gradient_is_ones_on_both():
    a, b = rand_tensor(2, 3), rand_tensor(2, 3)
    T.backward(T.sum_all(T.concat_last(a, b)))
    assert np.array_equal(a.grad, np.ones((2, 3), np.float32))
    assert np.array_equal(b.grad, np.ones((2, 3), np.float32))


def test_concat_leading_mismatch_raises():
    with pytest.raises(ShapeError):
        T.concat_last(rand_tensor(2, 3), rand_tensor(4, 3))


# --- stride_split -----------------------------------------------------------

def test_stride_split_even():
    h = T.Tensor(np.arange(8, dtype=np.float32).reshape(1, 4, 2))
    left, right, carry = T.stride_split(h)
    assert np.array_equal(left.data[0, :, 0], [0.0, 4.0])
    assert np.array_equal(right.data[0, :, 0], [2.0, 6.0])
    assert carry is None


def test_stride_split_odd_carries_last():
    h = T.Tensor(np.arange(6, dtype=np.float32).reshape(1, 3, 2))
    left, right, carry = T.stride_split(h)
    assert left.shape == (1, 1, 2) and right.shape == (1, 1, 2)
    assert np.array_equal(carry.data[0, 0], [4.0, 5.0])


def test_stride_split_backward_covers_contributing_positions():
    h = rand_tensor(1, 5, 2)
    left, right, _carry = T.stride_split(h)
    T.backward(T.sum_all(T.add(left, right)))
    expected = np.ones((1, 5, 2), np.float32)
    expected[0, 4] = 0.0  # carry not consumed
    assert np.array_equal(h.grad, expected)


def test_stride_split_too_short():
    with pytest.raises(ShapeError):
        T.stride_split(rand_tensor(1, 1, 2))


# --- rmsnorm ----------------------------------------------------------------

def test_rmsnorm_zeros_stay_zeros():
    x = T.Tensor(np.zeros((2, 8), np.float32))
    out = T.rmsnorm(x, T.Tensor(np.ones(8, np.float32)), eps=1e-6)
    assert np.array_equal(out.data, np.zeros((2, 8), np.float32))
    assert not np.isnan(out.data).any()


def test_rmsnorm_unit_mean_square_is_identity():
    x = np.array([[1.0, -1.0, 1.0, -1.0]], np.float32)  # mean square exactly 1
    out = T.rmsnorm(T.Tensor(x), T.Tensor(np.ones(4, np.float32)), eps=1e-6)
    assert np.allclose(out.data, x, atol=1e-5)


def test_rmsnorm_gradient_finite_differences():
    x, gain = rand_tensor(2, 8), rand_tensor(8)
    err = max_relative_error(lambda: T.sum_all(T.rmsnorm(x, gain, 1e-6)), [x, gain])
    assert err < 1e-3


# --- cumulative_mean_shifted ------------------------------------------------

def test_cumulative_mean_shifted_single_chunk_is_zero():
    s = rand_tensor(2, 1, 4, requires_grad=False)
    out = T.cumulative_mean_shifted(s)
    assert np.array_equal(out.data, np.zeros((2, 1, 4), np.float32))


def test_cumulative_mean_shifted_constant_sequence():
    v = RNG.uniform(-1, 1, 4).astype(np.float32)
    s = T.Tensor(np.stack([v, v, v])[None])
    out = T.cumulative_mean_shifted(s)
    assert np.array_equal(out.data[0, 0], np.zeros(4, np.float32))
    assert np.allclose(out.data[0, 1], v, atol=1e-6)
    assert np.allclose(out.data[0, 2], v, atol=1e-6)


def test_cumulative_mean_shifted_running_means():
    # hand computation: prefix means of [2, 4, 6] are [-, 2, 3]
    s = T.Tensor(np.array([[[2.0], [4.0], [6.0]]], np.float32))
    out = T.cumulative_mean_shifted(s)
    assert np.allclose(out.data[0, :, 0], [0.0, 2.0, 3.0], atol=1e-6)


def test_cumulative_mean_shifted_gradient():
    s = rand_tensor(2, 5, 3)
    err = max_relative_error(lambda: T.sum_all(T.mul(
        T.cumulative_mean_shifted(s), s)), [s])
    assert err < 1e-3


# --- softmax cross entropy --------------------------------------------------

def test_cross_entropy_uniform_logits():
    logits = T.Tensor(np.zeros((4, 65), np.float32))
    loss = T.softmax_cross_entropy(logits, [1, 2, 3, 4])
    assert loss.item() == pytest.approx(math.log(65), rel=1e-5)


def test_cross_entropy_vanishes_with_margin():
    losses = []
    for margin in (8.0, 20.0):
        logits = np.zeros((3, 7), np.float32)
        logits[np.arange(3), [1, 2, 3]] = margin
        losses.append(T.softmax_cross_entropy(T.Tensor(logits), [1, 2, 3]).item())
    assert losses[1] < losses[0] < 0.01


def test_cross_entropy_ignore_id():
    logits = T.Tensor(RNG.uniform(-1, 1, (4, 5)).astype(np.float32))
    full = T.softmax_cross_entropy(logits, [1, 2, 1, 2])
    part = T.softmax_cross_entropy(logits, [1, 2, 9, 9], ignore_id=9)
    manual = T.softmax_cross_entropy(T.Tensor(logits.data[:2]), [1, 2])
    assert part.item() == pytest.approx(manual.item(), rel=1e-6)
    assert part.item() != pytest.approx(full.item())


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(T.Tensor(np.zeros((2, 5), np.float32)), [1, 5])


def test_cross_entropy_gradient_finite_differences():
    logits = rand_tensor(3, 5)
    err = max_relative_error(
        lambda: T.softmax_cross_entropy(logits, [0, 2, 4]), [logits])
    assert err < 1e-3


# --- backward semantics -----------------------------------------------------

def test_backward_sum_gives_ones():
    x = rand_tensor(3, 4)
    T.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones((3, 4), np.float32))


def test_backward_quadratic():
    x = rand_tensor(3, 4)
    T.backward(T.sum_all(T.mul(x, x)))
    assert np.allclose(x.grad, 2 * x.data, atol=1e-6)


def test_fanout_sums_contributions():
    x = rand_tensor(4)
    T.backward(T.sum_all(T.add(x, x)))
    assert np.array_equal(x.grad, np.full(4, 2.0, np.float32))


def test_grads_accumulate_until_zeroed():
    x = rand_tensor(4)
    T.backward(T.sum_all(x))
    T.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.full(4, 2.0, np.float32))
    x.zero_grad()
    T.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones(4, np.float32))


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        T.backward(rand_tensor(3))


def test_no_grad_blocks_recording():
    x = rand_tensor(3)
    with T.no_grad():
        y = T.sum_all(T.mul(x, x))
    assert not y.requires_grad and y._backward is None


# --- determinism ------------------------------------------------------------

def test_same_graph_twice_is_bitwise_identical():
    a = RNG.uniform(-1, 1, (16, 8)).astype(np.float32)
    w = RNG.uniform(-1, 1, (8, 8)).astype(np.float32)

    def run():
        ta, tw = T.Tensor(a, requires_grad=True), T.Tensor(w, requires_grad=True)
        loss = T.sum_all(T.sigmoid(T.matmul(ta, tw)))
        T.backward(loss)
        return loss.data.copy(), ta.grad.copy(), tw.grad.copy()

    first, second = run(), run()
    for x, y in zip(first, second):
        assert np.array_equal(x, y)


def test_matmul_rows_bitwise_stable_across_batching():
    # the same logical rows must produce identical bits whether they are
    # multiplied in one big call or in per-group calls
    x = RNG.uniform(-1, 1, (64, 16)).astype(np.float32)
    w = RNG.uniform(-1, 1, (16, 8)).astype(np.float32)
    full = T.matmul(T.Tensor(x), T.Tensor(w)).data
    for lo, hi in ((0, 1), (3, 17), (10, 64)):
        part = T.matmul(T.Tensor(x[lo:hi]), T.Tensor(w)).data
        assert np.array_equal(part, full[lo:hi])
