import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterprune import tensor as T
from clusterprune.errors import NumericError, ShapeError
from clusterprune.rng import Rng


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


def test_scalar_conv():
    x = np.array([[[5.0]]])
    out = T.conv2d_forward(x, np.array([[[[2.0]]]]), np.zeros(1))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 10.0


def test_identity_kernel():
    x = Rng(0).normal((3, 3, 1))
    out = T.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_seed0_case_matches_oracle():
    r = Rng(0)
    x, w, b = r.normal((3, 3, 2)), r.normal((2, 2, 2, 3)), r.normal(3)
    out = T.conv2d_forward(x, w, b)
    assert out.shape == (2, 2, 3)
    assert rel_err(out, T.conv2d_oracle(x, w, b)) < 1e-12


def test_pointwise_conv_is_per_pixel_matmul():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]])
    w = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    # worked by hand: [x1, x2] @ [[1, 2], [3, 4]]
    expected = np.array([[[7.0, 10.0], [15.0, 22.0]], [[23.0, 34.0], [31.0, 46.0]]])
    np.testing.assert_array_equal(T.conv2d_oracle(x, w), expected)
    np.testing.assert_array_equal(T.conv2d_forward(x, w), expected)


def test_zero_filters_give_bias():
    x = Rng(1).normal((4, 4, 3))
    b = np.array([0.5, -1.0])
    out = T.conv2d_oracle(x, np.zeros((3, 3, 3, 2)), b, padding="same")
    assert out.shape == (4, 4, 2)
    np.testing.assert_array_equal(out, np.broadcast_to(b, out.shape))
    np.testing.assert_array_equal(T.conv2d_forward(x, np.zeros((3, 3, 3, 2)), b, padding="same"), out)


@settings(max_examples=150, deadline=None)
@given(
    h=st.integers(1, 8), w=st.integers(1, 8), m=st.integers(1, 4), n=st.integers(1, 4),
    d=st.integers(1, 4), stride=st.integers(1, 3), pad=st.integers(0, 2), seed=st.integers(0, 2**32),
)
def test_fast_conv_matches_oracle(h, w, m, n, d, stride, pad, seed):
    if d > h + 2 * pad or d > w + 2 * pad:
        return
    r = Rng(seed)
    x, f, b = r.normal((h, w, m)), r.normal((d, d, m, n)), r.normal(n)
    assert rel_err(T.conv2d_forward(x, f, b, stride, pad), T.conv2d_oracle(x, f, b, stride, pad)) < 1e-12


def test_batched_conv_equals_per_sample():
    r = Rng(2)
    x, f, b = r.normal((3, 5, 5, 2)), r.normal((3, 3, 2, 4)), r.normal(4)
    batched = T.conv2d_forward(x, f, b, 2, 1)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], T.conv2d_forward(x[i], f, b, 2, 1))


def test_linearity():
    r = Rng(3)
    x, y, f = r.normal((6, 6, 2)), r.normal((6, 6, 2)), r.normal((3, 3, 2, 3))
    lhs = T.conv2d_forward(2.5 * x - 0.75 * y, f, None, 1, "same")
    rhs = 2.5 * T.conv2d_forward(x, f, None, 1, "same") - 0.75 * T.conv2d_forward(y, f, None, 1, "same")
    assert rel_err(lhs, rhs) < 1e-12


def test_conv_errors():
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d_forward(np.zeros((3, 3, 2)), np.zeros((1, 1, 3, 1)))
    with pytest.raises(ShapeError, match="larger than padded"):
        T.conv2d_forward(np.zeros((2, 2, 1)), np.zeros((3, 3, 1, 1)))
    with pytest.raises(NumericError):
        T.conv2d_forward(np.full((2, 2, 1), np.nan), np.zeros((1, 1, 1, 1)))
    with pytest.raises(ShapeError):
        T.conv2d_oracle(np.zeros((3, 3, 2)), np.zeros((1, 1, 3, 1)))


def test_backward_zero_upstream():
    r = Rng(4)
    x, f = r.normal((4, 4, 2)), r.normal((3, 3, 2, 2))
    gi, gf, gb = T.conv2d_backward(x, f, np.zeros((2, 2, 2)))
    assert not gi.any() and not gf.any() and not gb.any()


def test_backward_scalar_case():
    gi, gf, gb = T.conv2d_backward(np.array([[[5.0]]]), np.array([[[[2.0]]]]), np.ones((1, 1, 1)))
    assert gf[0, 0, 0, 0] == 5.0
    assert gi[0, 0, 0] == 2.0
    assert gb[0] == 1.0


def _conv_fd(seed, shape=(3, 3, 2), d=2, n=3, stride=1, padding=0):
    r = Rng(seed)
    x, f, b = r.normal(shape), r.normal((d, d, shape[2], n)), r.normal(n)
    probe = r.normal(T.conv2d_forward(x, f, b, stride, padding).shape)

    def wrt_x(v):
        out = T.conv2d_forward(v, f, b, stride, padding)
        return float(np.sum(out * probe)), T.conv2d_backward(v, f, probe, stride, padding)[0]

    def wrt_f(v):
        out = T.conv2d_forward(x, v, b, stride, padding)
        return float(np.sum(out * probe)), T.conv2d_backward(x, v, probe, stride, padding)[1]

    def wrt_b(v):
        out = T.conv2d_forward(x, f, v, stride, padding)
        return float(np.sum(out * probe)), T.conv2d_backward(x, f, probe, stride, padding)[2]

    return max(T.grad_check(wrt_x, x), T.grad_check(wrt_f, f), T.grad_check(wrt_b, b))


def test_conv_backward_seed0_finite_difference():
    assert _conv_fd(0) < 1e-5


@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, 1), (2, 0)])
def test_conv_backward_strided_padded(stride, padding):
    assert _conv_fd(5, (5, 5, 2), 3, 2, stride, padding) < 1e-5


def test_dense_backward_seed0():
    r = Rng(0)
    w, b, x = r.normal((2, 3)), r.normal(3), r.normal((4, 2))
    probe = r.normal((4, 3))

    def wrt_w(v):
        return float(np.sum(T.dense_forward(x, v, b) * probe)), T.dense_backward(x, v, probe)[1]

    def wrt_x(v):
        return float(np.sum(T.dense_forward(v, w, b) * probe)), T.dense_backward(v, w, probe)[0]

    def wrt_b(v):
        return float(np.sum(T.dense_forward(x, w, v) * probe)), T.dense_backward(x, w, probe)[2]

    assert max(T.grad_check(wrt_w, w), T.grad_check(wrt_x, x), T.grad_check(wrt_b, b)) < 1e-5


def test_relu():
    np.testing.assert_array_equal(T.relu_forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(T.relu_backward(np.array([-1.0, 0.0, 2.0]), np.ones(3)), [0.0, 0.0, 1.0])


@pytest.mark.parametrize("kind", ["max", "avg"])
@pytest.mark.parametrize("size,stride", [(2, 2), (3, 1), (2, 1)])
def test_pool_backward(kind, size, stride):
    fwd = T.maxpool_forward if kind == "max" else T.avgpool_forward
    bwd = T.maxpool_backward if kind == "max" else T.avgpool_backward
    r = Rng(6)
    x = r.normal((2, 6, 6, 2))
    probe = r.normal(fwd(x, size, stride).shape)

    def f(v):
        return float(np.sum(fwd(v, size, stride) * probe)), bwd(v, probe, size, stride)

    assert T.grad_check(f, x) < 1e-5


def test_pool_values():
    x = np.arange(16.0).reshape(4, 4, 1)
    np.testing.assert_array_equal(T.maxpool_forward(x)[..., 0], [[5, 7], [13, 15]])
    np.testing.assert_array_equal(T.avgpool_forward(x)[..., 0], [[2.5, 4.5], [10.5, 12.5]])


@pytest.mark.parametrize("c", [2, 3, 10])
def test_softmax_uniform_logits(c):
    loss, grad = T.softmax_cross_entropy(np.zeros(c), 0)
    assert loss == pytest.approx(math.log(c), abs=1e-15)
    assert grad[0] == pytest.approx(1 / c - 1)


def test_softmax_gradient_and_range():
    r = Rng(7)
    z = r.normal((5, 4))
    y = np.array([0, 3, 1, 2, 3])
    assert T.grad_check(lambda v: T.softmax_cross_entropy(v, y), z) < 1e-5
    with pytest.raises(ValueError, match="out of range"):
        T.softmax_cross_entropy(z, np.array([0, 1, 2, 3, 4]))


def test_grad_check_quadratic():
    err = T.grad_check(lambda v: (float(np.sum(v ** 2)), 2 * v), np.array([1.0, 2.0]))
    assert err < 1e-8


def test_grad_check_flags_wrong_gradient():
    err = T.grad_check(lambda v: (float(np.sum(v ** 2)), 3 * v), np.array([1.0, 2.0]))
    assert err > 0.1


def test_grad_check_rejects_zero_step():
    with pytest.raises(ValueError):
        T.grad_check(lambda v: (float(np.sum(v)), np.ones_like(v)), np.ones(2), step=0)


def test_grad_check_non_finite():
    with pytest.raises(NumericError):
        T.grad_check(lambda v: (float("nan"), v), np.ones(2))


def test_determinism_bit_identical():
    a = [T.conv2d_forward(Rng(9).normal((2, 7, 7, 3)), Rng(10).normal((3, 3, 3, 5)), None, 1, "same")
         for _ in range(2)]
    assert a[0].tobytes() == a[1].tobytes()


def test_rng_streams():
    assert Rng(5).normal(8).tobytes() == Rng(5).normal(8).tobytes()
    assert Rng(5).derive(1).normal(8).tobytes() != Rng(5).derive(2).normal(8).tobytes()
    assert sorted(Rng(3).choice(10, 4)) == sorted(Rng(3).choice(10, 4))
    with pytest.raises(ValueError):
        Rng(-1)


def test_float32_opt_in():
    r = Rng(8)
    x, f = r.normal((5, 5, 2)).astype(np.float32), r.normal((3, 3, 2, 2)).astype(np.float32)
    out = T.conv2d_forward(x, f)
    assert out.dtype == np.float32
    assert rel_err(out, T.conv2d_oracle(x.astype(np.float64), f.astype(np.float64))) < 1e-4
