"""Tape arithmetic, reductions, convolutions and the gradient checker."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtriangle.autodiff import (
    DomainError,
    ShapeError,
    Tensor,
    bias_add,
    check_gradients,
    conv2d,
    conv_output_size,
    conv_transpose2d,
    elementwise,
    matmul,
    no_grad,
    reduce,
    slice_axis,
)

UNARY = ("neg", "square", "exp", "tanh", "relu", "leaky_relu")


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` over a float array, written independently of the tape."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def conv_loop(x, w, stride, pad):
    """Direct nested-loop cross-correlation."""
    B, C, H, W = x.shape
    F, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (H + 2 * pad - k) // stride + 1
    wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, F, ho, wo))
    for b in range(B):
        for f in range(F):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, f, i, j] = np.sum(patch * w[f])
    return out


class TestElementwise:
    def test_relu(self):
        out = Tensor(np.array([-1.0, 0.0, 2.0])).relu()
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_leaky_relu_default_slope(self):
        np.testing.assert_allclose(Tensor(np.array([-1.0])).leaky_relu().data, [-0.2])

    def test_square_derivative(self):
        a = Tensor(np.array(3.0), requires_grad=True)
        (a * a).backward()
        assert a.grad == pytest.approx(6.0)

    def test_relu_derivative_at_zero_is_zero(self):
        a = Tensor(np.array([0.0]), requires_grad=True)
        a.relu().sum().backward()
        assert a.grad[0] == 0.0

    def test_log_nonpositive_raises(self):
        with pytest.raises(DomainError):
            Tensor(np.array([1.0, 0.0])).log()
        with pytest.raises(DomainError):
            Tensor(np.array([-2.0])).log()

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            elementwise("add", Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) * Tensor(np.ones(3))

    def test_scalar_broadcast_both_sides(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        s = Tensor(np.array(3.0), requires_grad=True)
        (a * s + 1.0).sum().backward()
        np.testing.assert_allclose(a.grad, np.full((2, 2), 3.0))
        assert s.grad == pytest.approx(4.0)

    def test_gradient_accumulates_over_consumers(self):
        a = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        (a * a + a.exp() + a).sum().backward()
        np.testing.assert_allclose(a.grad, 2 * a.data + np.exp(a.data) + 1)

    def test_detached_tensor_receives_no_gradient(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        b = a.detach()
        (a * b).sum().backward()
        assert b.grad is None
        np.testing.assert_allclose(a.grad, [1.0, 2.0])

    def test_no_grad_records_nothing(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        with no_grad():
            out = a * 2.0
        assert not out.requires_grad

    def test_backward_requires_scalar(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            (a * 2.0).backward()

    @pytest.mark.parametrize("kind", UNARY)
    def test_unary_gradcheck(self, kind):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.2, 1.5, 6) * rng.choice([-1, 1], 6)
        rep = check_gradients(lambda a: elementwise(kind, a).sum(), [x], tol=1e-5)
        assert rep.passed, rep.max_rel_error

    def test_log_div_gradcheck(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(0.5, 2, (3, 2)), rng.uniform(0.5, 2, (3, 2))
        rep = check_gradients(lambda p, q: (p / q).log().sum(), [a, b], tol=1e-5)
        assert rep.passed


class TestMatmul:
    def test_identity(self):
        A = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(matmul(np.eye(2), A).data, A)

    def test_small_product(self):
        assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        rep = check_gradients(lambda p, q: (p @ q).square().sum(), [a, b], tol=1e-6)
        assert rep.passed

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_bias_add_gradient(self):
        rng = np.random.default_rng(4)
        x, b = rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(2)
        rep = check_gradients(lambda p, q: bias_add(p, q).square().sum(), [x, b], tol=1e-6)
        assert rep.passed


class TestReduce:
    def test_mean(self):
        assert reduce("mean", np.array([1.0, 2.0, 3.0])).item() == 2.0

    def test_empty_axes_is_identity(self):
        x = np.arange(4.0).reshape(2, 2)
        np.testing.assert_array_equal(reduce("sum", x, ()).data, x)

    def test_mean_gradient_uniform(self):
        a = Tensor(np.arange(5.0), requires_grad=True)
        a.mean().backward()
        np.testing.assert_allclose(a.grad, np.full(5, 0.2))

    def test_invalid_axis(self):
        with pytest.raises(ValueError):
            reduce("sum", np.ones((2, 2)), 3)

    def test_partial_axes_gradcheck(self):
        x = np.random.default_rng(5).standard_normal((2, 3, 4))
        rep = check_gradients(lambda a: reduce("mean", a, (0, 2)).square().sum(), [x], tol=1e-6)
        assert rep.passed

    def test_slice_gradient(self):
        x = np.random.default_rng(6).standard_normal((3, 6))
        rep = check_gradients(lambda a: slice_axis(a, 1, 2, 5).square().sum(), [x], tol=1e-6)
        assert rep.passed


class TestConv:
    def test_ones_sum(self):
        out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.data.tolist() == [[[[9.0]]]]

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_delta_kernel_identity(self, k):
        x = np.random.default_rng(k).standard_normal((2, 1, 6, 6))
        w = np.zeros((1, 1, k, k))
        w[0, 0, k // 2, k // 2] = 1.0
        np.testing.assert_allclose(conv2d(x, w, 1, k // 2).data, x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (2, 0), (1, 2)])
    def test_matches_loop(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 4, 4))
        if (8 + 2 * pad - 4) % stride:
            pytest.skip("non-integral extent")
        np.testing.assert_allclose(conv2d(x, w, stride, pad).data, conv_loop(x, w, stride, pad), atol=1e-12)

    def test_nonintegral_extent(self):
        with pytest.raises(ShapeError):
            conv_output_size(7, 4, 2, 1)
        with pytest.raises(ShapeError):
            conv2d(np.ones((1, 1, 7, 7)), np.ones((1, 1, 4, 4)), 2, 1)

    def test_conv_gradcheck(self):
        rng = np.random.default_rng(7)
        x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 4, 4))
        rep = check_gradients(lambda a, b: conv2d(a, b, 2, 1).square().sum(), [x, w], tol=1e-5)
        assert rep.passed, rep.max_rel_error

    def test_transpose_block(self):
        out = conv_transpose2d(np.array([[[[2.0]]]]), np.ones((1, 1, 2, 2)), 2, 0)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.0))

    def test_transpose_gradcheck(self):
        rng = np.random.default_rng(8)
        x, w = rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((4, 3, 4, 4))
        rep = check_gradients(lambda a, b: conv_transpose2d(a, b, 2, 1).square().sum(), [x, w], tol=1e-5)
        assert rep.passed, rep.max_rel_error

    @settings(max_examples=25, deadline=None)
    @given(
        seed=st.integers(0, 2**31 - 1),
        geom=st.sampled_from([(8, 4, 2, 1), (7, 3, 2, 0), (5, 3, 1, 1), (6, 2, 2, 0), (3, 3, 1, 0)]),
        channels=st.tuples(st.integers(1, 3), st.integers(1, 3)),
    )
    def test_adjoint_identity(self, seed, geom, channels):
        n, k, s, p = geom
        C, F = channels
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, C, n, n))
        w = rng.standard_normal((F, C, k, k))
        y = rng.standard_normal(conv2d(x, w, s, p).shape)
        lhs = np.sum(conv2d(x, w, s, p).data * y)
        rhs = np.sum(x * conv_transpose2d(y, w, s, p).data)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


class TestCheckGradients:
    def test_sum_of_squares(self):
        rep = check_gradients(lambda a: a.square().sum(), [np.array([1.0, 2.0])])
        np.testing.assert_allclose(rep.analytic[0], [2.0, 4.0])
        assert rep.max_rel_error < 1e-8 and rep.passed

    def test_kink_is_flagged(self):
        rep = check_gradients(lambda a: a.relu().sum(), [np.array([0.0, 1.0])])
        assert rep.near_kink and not rep.passed

    def test_nonscalar_output(self):
        with pytest.raises(ShapeError):
            check_gradients(lambda a: a * 2.0, [np.ones(3)])

    def test_matches_independent_differences(self):
        x = np.random.default_rng(9).standard_normal((2, 3))
        f = lambda a: (a.tanh() * a).sum()
        rep = check_gradients(f, [x])
        oracle = numeric_grad(lambda v: float(np.sum(np.tanh(v) * v)), x)
        np.testing.assert_allclose(rep.analytic[0], oracle, rtol=1e-8)

    def test_bitwise_repeatable(self):
        rng = np.random.default_rng(10)
        x, w = rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3))

        def run():
            a, b = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
            out = conv2d(a, b, 1, 1).tanh().sum()
            out.backward()
            return out.data.tobytes() + a.grad.tobytes() + b.grad.tobytes()

        assert run() == run()


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    kind=st.sampled_from(("add", "sub", "mul", "div")),
    shape=st.sampled_from([(3,), (2, 3), (2, 2, 2)]),
)
def test_binary_ops_match_differences(seed, kind, shape):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 2.0, shape)
    b = rng.uniform(0.5, 2.0, shape)
    rep = check_gradients(lambda p, q: elementwise(kind, p, q).square().sum(), [a, b], tol=1e-5)
    assert rep.passed, rep.max_rel_error
