import numpy as np
import pytest

from waecnn.tensor_core import (
    ConvSpec,
    conv2d,
    conv2d_grad,
    deconv2d,
    deconv2d_grad,
    global_avg_pool,
    global_avg_pool_grad,
    grad_check,
    linear,
    linear_grad,
    maxpool2d,
    maxpool2d_grad,
    relu,
    relu_grad,
    softmax_cross_entropy,
)

from oracles import conv2d_naive, deconv2d_naive, maxpool2d_naive

SEEDS = range(10)


def positive(rng, shape, dtype=np.float64):
    """Probe data bounded away from zero.

    Keeps every finite-difference gradient coordinate well above the
    relative-error denominator floor (no cancellation in the window sums).
    """
    return rng.uniform(0.5, 1.5, size=shape).astype(dtype)


def conv_spec(c_in, c_out, k=3, stride=1, padding=1, transposed=False):
    return ConvSpec(c_in, c_out, k, k, stride=stride, padding=padding,
                    transposed=transposed)


class TestConv2d:
    def test_all_ones_3x3(self):
        x = np.ones((1, 1, 3, 3), dtype=np.float32)
        w = np.ones((1, 1, 3, 3), dtype=np.float32)
        out = conv2d(x, w, None, conv_spec(1, 1))
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float32)
        np.testing.assert_array_equal(out[0, 0], expected)

    def test_strided_output_size(self):
        x = np.zeros((1, 1, 4, 4), dtype=np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        out = conv2d(x, w, None, conv_spec(1, 1, stride=2))
        assert out.shape == (1, 1, 2, 2)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_nested_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((16, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(16).astype(np.float32)
        out = conv2d(x, w, b, conv_spec(3, 16))
        ref = conv2d_naive(x, w, b, stride=1, padding=1)
        np.testing.assert_allclose(out, ref, atol=1e-5)

    def test_strided_matches_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
        w = rng.standard_normal((5, 4, 3, 3)).astype(np.float32)
        out = conv2d(x, w, None, conv_spec(4, 5, stride=2))
        ref = conv2d_naive(x, w, None, stride=2, padding=1)
        np.testing.assert_allclose(out, ref, atol=1e-5)

    def test_same_padding_preserves_size(self):
        rng = np.random.default_rng(0)
        for k in (1, 3, 5):
            x = rng.standard_normal((1, 2, 7, 9)).astype(np.float32)
            w = rng.standard_normal((2, 2, k, k)).astype(np.float32)
            spec = conv_spec(2, 2, k=k, padding=(k - 1) // 2)
            assert conv2d(x, w, None, spec).shape == x.shape

    def test_batch_equals_concatenated_singles(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 2, 5, 5)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        spec = conv_spec(2, 3)
        full = conv2d(x, w, b, spec)
        singles = np.concatenate(
            [conv2d(x[i : i + 1], w, b, spec) for i in range(4)], axis=0
        )
        np.testing.assert_allclose(full, singles, atol=1e-6)

    def test_channel_mismatch_rejected(self):
        x = np.zeros((1, 2, 4, 4), dtype=np.float32)
        w = np.zeros((1, 3, 3, 3), dtype=np.float32)
        with pytest.raises(ValueError, match="channels"):
            conv2d(x, w, None, conv_spec(3, 1))

    def test_too_small_input_rejected(self):
        x = np.zeros((1, 1, 2, 2), dtype=np.float32)
        w = np.zeros((1, 1, 5, 5), dtype=np.float32)
        with pytest.raises(ValueError, match="output height"):
            conv2d(x, w, None, conv_spec(1, 1, k=5, padding=0))

    def test_finite_outputs(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        assert np.isfinite(conv2d(x, w, None, conv_spec(3, 4))).all()


class TestConv2dGrad:
    def test_zero_grad_out(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        spec = conv_spec(2, 3)
        gy = np.zeros((1, 3, 4, 4), dtype=np.float32)
        gx, gw, gb = conv2d_grad(gy, x, w, spec)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_1x1_kernel_scalar_chain(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        w = np.full((1, 1, 1, 1), 2.5, dtype=np.float32)
        spec = conv_spec(1, 1, k=1, padding=0)
        gy = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        gx, _, _ = conv2d_grad(gy, x, w, spec)
        np.testing.assert_allclose(gx, 2.5 * gy, atol=1e-6)

    def test_grad_out_shape_rejected(self):
        x = np.zeros((1, 1, 4, 4), dtype=np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        with pytest.raises(ValueError, match="grad_out"):
            conv2d_grad(np.zeros((1, 1, 3, 3), dtype=np.float32), x, w,
                        conv_spec(1, 1))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_finite_differences_f64(self, seed):
        rng = np.random.default_rng(seed)
        x = positive(rng, (2, 2, 5, 5))
        w = positive(rng, (3, 2, 3, 3))
        b = positive(rng, 3)
        spec = conv_spec(2, 3, stride=2)
        gy = positive(rng, (2, 3, 3, 3))

        def f(x_, w_, b_):
            out = conv2d(x_, w_, b_, spec)
            gx, gw, gb = conv2d_grad(gy, x_, w_, spec)
            return float((out * gy).sum()), [gx, gw, gb]

        assert grad_check(f, [x, w, b], epsilon=1e-5) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_finite_differences_f32(self, seed):
        rng = np.random.default_rng(seed)
        x = positive(rng, (1, 2, 4, 4), np.float32)
        w = positive(rng, (2, 2, 3, 3), np.float32)
        b = positive(rng, 2, np.float32)
        spec = conv_spec(2, 2)
        gy = positive(rng, (1, 2, 4, 4), np.float32)

        def f(x_, w_, b_):
            out = conv2d(x_, w_, b_, spec)
            gx, gw, gb = conv2d_grad(gy, x_, w_, spec)
            return float((out.astype(np.float64) * gy).sum()), [gx, gw, gb]

        assert grad_check(f, [x, w, b], epsilon=1e-3) < 1e-3


class TestDeconv2d:
    def test_size_doubles(self):
        x = np.zeros((1, 1, 2, 2), dtype=np.float32)
        w = np.zeros((1, 1, 4, 4), dtype=np.float32)
        spec = conv_spec(1, 1, k=4, stride=2, padding=1, transposed=True)
        assert deconv2d(x, w, None, spec).shape == (1, 1, 4, 4)

    def test_doubles_any_size(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        spec = conv_spec(2, 3, k=4, stride=2, padding=1, transposed=True)
        for hw in (1, 3, 7):
            x = rng.standard_normal((1, 2, hw, hw)).astype(np.float32)
            assert deconv2d(x, w, None, spec).shape == (1, 3, 2 * hw, 2 * hw)

    def test_zero_input_zero_output(self):
        x = np.zeros((1, 2, 3, 3), dtype=np.float32)
        w = np.ones((2, 1, 4, 4), dtype=np.float32)
        spec = conv_spec(2, 1, k=4, stride=2, padding=1, transposed=True)
        assert not deconv2d(x, w, np.zeros(1, dtype=np.float32), spec).any()

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_scatter_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        w = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        spec = conv_spec(3, 2, k=4, stride=2, padding=1, transposed=True)
        out = deconv2d(x, w, b, spec)
        ref = deconv2d_naive(x, w, b, stride=2, padding=1)
        np.testing.assert_allclose(out, ref, atol=1e-5)

    def test_equals_conv_grad_input_of_mirrored_spec(self):
        rng = np.random.default_rng(5)
        y = rng.standard_normal((1, 3, 3, 3)).astype(np.float32)
        w = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
        dspec = conv_spec(3, 2, k=4, stride=2, padding=1, transposed=True)
        mirrored = conv_spec(2, 3, k=4, stride=2, padding=1)
        x_mirror = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        gx, _, _ = conv2d_grad(y, x_mirror, w, mirrored)
        np.testing.assert_allclose(deconv2d(y, w, None, dspec), gx, atol=1e-5)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_adjoint_inner_product(self, seed):
        # <conv(x), y> == <x, deconv(y)>: the conv weight (out,in,kh,kw) is
        # already in deconv layout (in,out,kh,kw) for the adjoint map.
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((4, 3, 4, 4)).astype(np.float32)
        cspec = conv_spec(3, 4, k=4, stride=2, padding=1)
        dspec = conv_spec(4, 3, k=4, stride=2, padding=1, transposed=True)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        y = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
        lhs = (conv2d(x, w, None, cspec).astype(np.float64) * y).sum()
        rhs = (x.astype(np.float64) * deconv2d(y, w, None, dspec)).sum()
        assert abs(lhs - rhs) / max(abs(lhs), 1.0) < 1e-5

    def test_non_transposed_spec_rejected(self):
        x = np.zeros((1, 1, 2, 2), dtype=np.float32)
        w = np.zeros((1, 1, 4, 4), dtype=np.float32)
        with pytest.raises(ValueError, match="transposed"):
            deconv2d(x, w, None, conv_spec(1, 1, k=4, stride=2))


class TestDeconv2dGrad:
    def test_zero_grad_out(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        w = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)
        spec = conv_spec(2, 1, k=4, stride=2, padding=1, transposed=True)
        gx, gw, gb = deconv2d_grad(np.zeros((1, 1, 6, 6), np.float32), x, w, spec)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_single_element_input_grad_weight(self):
        # with a 1x1 input, d loss/d w[c,o,u,v] windows grad_out against x
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 1, 1, 1))
        w = rng.standard_normal((1, 1, 4, 4))
        spec = conv_spec(1, 1, k=4, stride=2, padding=1, transposed=True)
        gy = rng.standard_normal((1, 1, 2, 2))
        _, gw, _ = deconv2d_grad(gy, x, w, spec)
        ref = np.zeros_like(w)
        for u in range(4):
            for v in range(4):
                p, q = u - 1, v - 1  # output coord of kernel tap (stride offsets)
                if 0 <= p < 2 and 0 <= q < 2:
                    ref[0, 0, u, v] = x[0, 0, 0, 0] * gy[0, 0, p, q]
        np.testing.assert_allclose(gw, ref, atol=1e-10)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_finite_differences_f64(self, seed):
        rng = np.random.default_rng(seed)
        x = positive(rng, (1, 2, 3, 3))
        w = positive(rng, (2, 3, 4, 4))
        b = positive(rng, 3)
        spec = conv_spec(2, 3, k=4, stride=2, padding=1, transposed=True)
        gy = positive(rng, (1, 3, 6, 6))

        def f(x_, w_, b_):
            out = deconv2d(x_, w_, b_, spec)
            gx, gw, gb = deconv2d_grad(gy, x_, w_, spec)
            return float((out * gy).sum()), [gx, gw, gb]

        assert grad_check(f, [x, w, b], epsilon=1e-5) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_finite_differences_f32(self, seed):
        rng = np.random.default_rng(seed)
        x = positive(rng, (1, 2, 3, 3), np.float32)
        w = positive(rng, (2, 2, 4, 4), np.float32)
        b = positive(rng, 2, np.float32)
        spec = conv_spec(2, 2, k=4, stride=2, padding=1, transposed=True)
        gy = positive(rng, (1, 2, 6, 6), np.float32)

        def f(x_, w_, b_):
            out = deconv2d(x_, w_, b_, spec)
            gx, gw, gb = deconv2d_grad(gy, x_, w_, spec)
            return float((out.astype(np.float64) * gy).sum()), [gx, gw, gb]

        assert grad_check(f, [x, w, b], epsilon=1e-3) < 1e-3


class TestRelu:
    def test_values(self):
        x = np.array([-1.0, 0.0, 2.0], dtype=np.float32)
        np.testing.assert_array_equal(relu(x), [0.0, 0.0, 2.0])

    def test_grad_passes_positive(self):
        g = relu_grad(np.array([1.0]), np.array([3.0]))
        assert g[0] == 1.0

    def test_grad_zero_at_zero(self):
        g = relu_grad(np.array([1.0]), np.array([0.0]))
        assert g[0] == 0.0

    def test_grad_blocks_negative(self):
        g = relu_grad(np.array([5.0]), np.array([-2.0]))
        assert g[0] == 0.0


class TestMaxpool:
    def test_2x2(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32).reshape(1, 1, 2, 2)
        out, _ = maxpool2d(x, 2, 2)
        assert out[0, 0, 0, 0] == 4.0

    def test_constant_input_routes_to_first(self):
        x = np.ones((1, 1, 2, 2), dtype=np.float32)
        out, idx = maxpool2d(x, 2, 2)
        gy = np.full((1, 1, 1, 1), 7.0, dtype=np.float32)
        gx = maxpool2d_grad(gy, idx, (1, 1, 2, 2), 2, 2)
        expected = np.zeros((1, 1, 2, 2), dtype=np.float32)
        expected[0, 0, 0, 0] = 7.0
        np.testing.assert_array_equal(gx, expected)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
        out, _ = maxpool2d(x, 2, 2)
        np.testing.assert_allclose(out, maxpool2d_naive(x, 2, 2), atol=1e-6)

    def test_non_divisible_rejected(self):
        x = np.zeros((1, 1, 5, 4), dtype=np.float32)
        with pytest.raises(ValueError, match="height 5"):
            maxpool2d(x, 2, 2)

    def test_grad_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 4, 4))
        gy = rng.standard_normal((1, 2, 2, 2))

        def f(x_):
            out, idx = maxpool2d(x_, 2, 2)
            gx = maxpool2d_grad(gy, idx, x_.shape, 2, 2)
            return float((out * gy).sum()), [gx]

        assert grad_check(f, [x], epsilon=1e-6) < 1e-6


class TestLinear:
    def test_identity(self):
        x = np.arange(6, dtype=np.float32).reshape(2, 3)
        out = linear(x, np.eye(3, dtype=np.float32), np.zeros(3, dtype=np.float32))
        np.testing.assert_array_equal(out, x)

    def test_zero_weight_gives_bias(self):
        x = np.ones((3, 4), dtype=np.float32)
        b = np.array([1.0, -2.0], dtype=np.float32)
        out = linear(x, np.zeros((4, 2), dtype=np.float32), b)
        np.testing.assert_array_equal(out, np.tile(b, (3, 1)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="features"):
            linear(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_grad_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 2))
        b = rng.standard_normal(2)
        gy = rng.standard_normal((3, 2))

        def f(x_, w_, b_):
            out = linear(x_, w_, b_)
            gx, gw, gb = linear_grad(gy, x_, w_)
            return float((out * gy).sum()), [gx, gw, gb]

        assert grad_check(f, [x, w, b], epsilon=1e-6) < 1e-7


class TestGlobalAvgPool:
    def test_values_and_grad(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 4, 4))
        out = global_avg_pool(x)
        np.testing.assert_allclose(out, x.mean(axis=(2, 3)))
        gy = rng.standard_normal((2, 3))

        def f(x_):
            out_ = global_avg_pool(x_)
            return float((out_ * gy).sum()), [global_avg_pool_grad(gy, x_.shape)]

        assert grad_check(f, [x], epsilon=1e-6) < 1e-8


class TestSoftmaxCrossEntropy:
    def test_uniform_two_class(self):
        loss, _ = softmax_cross_entropy(np.zeros((1, 2)), np.array([1]))
        assert abs(loss - np.log(2)) < 1e-7

    def test_large_margin_no_overflow(self):
        loss, grad = softmax_cross_entropy(
            np.array([[1000.0, 0.0]]), np.array([0])
        )
        assert loss < 1e-6
        assert np.isfinite(grad).all()

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_grad_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.standard_normal((4, 10))
        labels = rng.integers(0, 10, size=4)

        def f(s):
            loss, grad = softmax_cross_entropy(s, labels)
            return loss, [grad]

        assert grad_check(f, [scores], epsilon=1e-5) < 1e-6

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        scores = rng.standard_normal((3, 5))
        labels = np.array([0, 2, 4])
        l1, _ = softmax_cross_entropy(scores, labels)
        l2, _ = softmax_cross_entropy(scores + 100.0, labels)
        assert abs(l1 - l2) < 1e-6


class TestGradCheck:
    def test_linear_function_exact(self):
        def f(x):
            return float(3.0 * x.sum()), [np.full_like(x, 3.0)]

        assert grad_check(f, [np.array([1.0, -2.0, 0.5])]) < 1e-9

    def test_relu_away_from_zero(self):
        x = np.array([1.0, -1.5, 2.0])

        def f(x_):
            return float(relu(x_).sum()), [relu_grad(np.ones_like(x_), x_)]

        assert grad_check(f, [x], epsilon=1e-5) < 1e-6

    def test_bad_epsilon_rejected(self):
        with pytest.raises(ValueError, match="epsilon"):
            grad_check(lambda x: (0.0, [x]), [np.zeros(1)], epsilon=0.0)
