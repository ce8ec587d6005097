import numpy as np
import pytest

from hsdenoise.conv import (
    ConvSpec,
    KernelSet,
    conv_backward,
    conv_forward,
    conv_forward_cl,
    conv_input_grad_cl,
    conv_weight_grad_cl,
    flops_estimate,
    init_kernels,
    same_padding,
    unfold_cl,
)
from hsdenoise.errors import ShapeError
from hsdenoise.tensorops import unfold_input

from test_tensorops import naive_conv

ALL_KERNELS = [(3, 3, 3), (1, 3, 3), (3, 1, 1), (1, 3, 1), (1, 1, 3), (1, 1, 1)]


def random_case(rng, kernel):
    m = int(rng.integers(1, 5))
    c = int(rng.integers(1, 4))
    dims = tuple(int(rng.integers(k, k + 4)) for k in kernel)
    spec = ConvSpec(m, c, kernel)
    kern = KernelSet(rng.standard_normal(spec.weight_shape), rng.standard_normal(m))
    x = rng.standard_normal((c,) + dims)
    return spec, kern, x


class TestForward:
    def test_identity_pointwise_kernel(self):
        spec = ConvSpec(1, 1, (1, 1, 1), bias_enabled=False)
        kern = KernelSet(np.ones((1, 1, 1, 1, 1)), None)
        x = np.random.default_rng(0).standard_normal((1, 3, 4, 5))
        assert np.array_equal(conv_forward(spec, kern, x), x)

    def test_all_ones_kernel_interior_sum(self):
        spec = ConvSpec(1, 1, (3, 3, 3), bias_enabled=False)
        kern = KernelSet(np.ones((1, 1, 3, 3, 3)), None)
        x = np.ones((1, 5, 5, 5))
        out = conv_forward(spec, kern, x)
        assert out.shape == (1, 5, 5, 5)
        assert out[0, 2, 2, 2] == pytest.approx(27.0)

    def test_matches_unfold_matmul_example(self):
        rng = np.random.default_rng(1)
        spec = ConvSpec(4, 3, (3, 3, 3), bias_enabled=False)
        kern = init_kernels(spec, rng)
        x = rng.standard_normal((3, 5, 6, 6))
        direct = conv_forward(spec, kern, x, path="direct")
        cols = unfold_input(x, spec.kernel_shape, spec.padding)
        via_matmul = (kern.weights.reshape(4, -1) @ cols).reshape(direct.shape)
        assert np.allclose(direct, via_matmul, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("seed", range(8))
    def test_direct_and_matmul_paths_agree(self, seed):
        rng = np.random.default_rng(seed)
        kernel = ALL_KERNELS[seed % len(ALL_KERNELS)]
        spec, kern, x = random_case(rng, kernel)
        a = conv_forward(spec, kern, x, path="direct")
        b = conv_forward(spec, kern, x, path="matmul")
        scale = np.max(np.abs(a)) or 1.0
        assert np.max(np.abs(a - b)) <= 1e-10 * scale

    def test_matches_naive_voxel_loop(self):
        rng = np.random.default_rng(2)
        spec = ConvSpec(2, 2, (1, 3, 3), bias_enabled=False)
        kern = init_kernels(spec, rng)
        x = rng.standard_normal((2, 3, 5, 5))
        want = naive_conv(x, kern.weights, spec.padding)
        got = conv_forward(spec, kern, x)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self):
        spec = ConvSpec(2, 3, (1, 1, 1))
        kern = init_kernels(spec, np.random.default_rng(0))
        with pytest.raises(ShapeError, match="channels"):
            conv_forward(spec, kern, np.zeros((2, 3, 3, 3)))

    def test_linearity(self):
        rng = np.random.default_rng(3)
        spec = ConvSpec(3, 2, (3, 1, 1), bias_enabled=False)
        kern = init_kernels(spec, rng)
        x, y = rng.standard_normal((2, 2, 4, 4, 4))
        lhs = conv_forward(spec, kern, 0.3 * x - 2.0 * y)
        rhs = 0.3 * conv_forward(spec, kern, x) - 2.0 * conv_forward(spec, kern, y)
        assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10)

    def test_translation_equivariance_interior(self):
        rng = np.random.default_rng(4)
        spec = ConvSpec(2, 1, (3, 3, 3), bias_enabled=False)
        kern = init_kernels(spec, rng)
        x = rng.standard_normal((1, 6, 6, 6))
        shifted = np.roll(x, 1, axis=3)
        out = conv_forward(spec, kern, x)
        out_shifted = conv_forward(spec, kern, shifted)
        # compare away from every padded border and the wrap column
        assert np.allclose(
            out_shifted[:, 1:-1, 1:-1, 2:-1], np.roll(out, 1, axis=3)[:, 1:-1, 1:-1, 2:-1],
            rtol=1e-10, atol=1e-12,
        )

    def test_horizontal_kernel_keeps_w_constant_input_constant(self):
        rng = np.random.default_rng(5)
        spec = ConvSpec(2, 2, (1, 1, 3), bias_enabled=False)
        kern = init_kernels(spec, rng)
        x = np.broadcast_to(rng.standard_normal((2, 4, 4, 1)), (2, 4, 4, 6)).copy()
        out = conv_forward(spec, kern, x)
        interior = out[:, :, :, 1:-1]
        assert np.allclose(interior, interior[:, :, :, :1], rtol=1e-10, atol=1e-12)


class TestBackward:
    def test_zero_grad_output(self):
        rng = np.random.default_rng(6)
        spec = ConvSpec(2, 2, (1, 3, 1))
        kern = init_kernels(spec, rng)
        x = rng.standard_normal((2, 3, 4, 4))
        gx, gw, gb = conv_backward(spec, kern, x, np.zeros((2, 3, 4, 4)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_identity_kernel_routes_single_voxel(self):
        spec = ConvSpec(1, 1, (1, 1, 1), bias_enabled=False)
        kern = KernelSet(np.ones((1, 1, 1, 1, 1)), None)
        x = np.zeros((1, 3, 3, 3))
        g = np.zeros((1, 3, 3, 3))
        g[0, 1, 2, 0] = 5.0
        gx, _, _ = conv_backward(spec, kern, x, g)
        assert np.array_equal(gx, g)

    def test_finite_differences(self):
        rng = np.random.default_rng(7)
        spec = ConvSpec(2, 2, (3, 3, 3))
        kern = init_kernels(spec, rng)
        x = rng.standard_normal((2, 4, 4, 4))
        g = rng.standard_normal((2, 4, 4, 4))
        gx, gw, gb = conv_backward(spec, kern, x, g)
        step = 1e-5

        def loss(weights, bias, inp):
            out = conv_forward(spec, KernelSet(weights, bias), inp)
            return float(np.sum(g * out))

        for idx in [(0, 0, 0, 0), (1, 2, 3, 1), (0, 3, 0, 2)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += step
            xm[idx] -= step
            num = (loss(kern.weights, kern.bias, xp) - loss(kern.weights, kern.bias, xm)) / (2 * step)
            assert abs(num - gx[idx]) <= 1e-4 * max(1.0, abs(num))
        for idx in [(0, 0, 0, 0, 0), (1, 1, 2, 2, 2), (0, 1, 1, 0, 1)]:
            wp, wm = kern.weights.copy(), kern.weights.copy()
            wp[idx] += step
            wm[idx] -= step
            num = (loss(wp, kern.bias, x) - loss(wm, kern.bias, x)) / (2 * step)
            assert abs(num - gw[idx]) <= 1e-4 * max(1.0, abs(num))
        for i in range(2):
            bp, bm = kern.bias.copy(), kern.bias.copy()
            bp[i] += step
            bm[i] -= step
            num = (loss(kern.weights, bp, x) - loss(kern.weights, bm, x)) / (2 * step)
            assert abs(num - gb[i]) <= 1e-4 * max(1.0, abs(num))

    def test_grad_shape_mismatch(self):
        spec = ConvSpec(2, 1, (1, 1, 1))
        kern = init_kernels(spec, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            conv_backward(spec, kern, np.zeros((1, 2, 2, 2)), np.zeros((2, 2, 2, 3)))


class TestChannelsLastKernels:
    """The channels-last fast path must agree with the channels-first contract path."""

    @pytest.mark.parametrize("kernel", ALL_KERNELS)
    def test_forward_agrees(self, kernel):
        rng = np.random.default_rng(sum(kernel))
        spec, kern, x = random_case(rng, kernel)
        ref = conv_forward(spec, KernelSet(kern.weights, None), x, path="direct")
        got = conv_forward_cl(np.ascontiguousarray(np.moveaxis(x, 0, -1)), kern.weights, spec.padding)
        assert np.allclose(np.moveaxis(got, -1, 0), ref, rtol=1e-12, atol=1e-12)

    def test_unfold_cl_matches_unfold_input(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((3, 4, 5, 6))
        for kernel, pad in [((3, 3, 3), (1, 1, 1)), ((1, 1, 3), (0, 0, 1)), ((1, 3, 3), (0, 1, 1))]:
            ref = unfold_input(x, kernel, pad)  # (C*taps, N), rows (c, taps)
            cols, _ = unfold_cl(np.ascontiguousarray(np.moveaxis(x, 0, -1)), kernel, pad)
            taps = int(np.prod(kernel))
            reordered = cols.reshape(-1, taps, 3).transpose(0, 2, 1).reshape(cols.shape[0], -1)
            assert np.array_equal(reordered, ref.T)

    def test_strided_forward_subsamples(self):
        rng = np.random.default_rng(11)
        spec = ConvSpec(4, 3, (1, 3, 3), bias_enabled=False)
        kern = init_kernels(spec, rng)
        x = rng.standard_normal((3, 5, 8, 8))
        full = conv_forward(spec, kern, x)
        strided = conv_forward_cl(
            np.ascontiguousarray(np.moveaxis(x, 0, -1)), kern.weights, (0, 1, 1), stride=(1, 2, 2)
        )
        assert np.allclose(np.moveaxis(strided, -1, 0), full[:, :, ::2, ::2], rtol=1e-12)

    @pytest.mark.parametrize("kernel,stride", [((1, 3, 3), (1, 1, 1)), ((3, 3, 3), (1, 1, 1)), ((1, 3, 3), (1, 2, 2))])
    def test_grads_match_finite_differences(self, kernel, stride):
        rng = np.random.default_rng(12)
        pad = same_padding(kernel) if stride == (1, 1, 1) else (0, 1, 1)
        x = rng.standard_normal((6, 8, 8, 2))
        w = rng.standard_normal((3, 2) + kernel)
        g = rng.standard_normal(conv_forward_cl(x, w, pad, stride).shape)
        gx = conv_input_grad_cl(g, w, pad, x.shape[:3], stride)
        gw = conv_weight_grad_cl(g, x, kernel, pad, stride)
        step = 1e-6
        for idx in [(0, 0, 0, 0), (3, 4, 5, 1), (5, 7, 7, 0)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += step
            xm[idx] -= step
            num = (np.sum(g * conv_forward_cl(xp, w, pad, stride)) - np.sum(g * conv_forward_cl(xm, w, pad, stride))) / (2 * step)
            assert abs(num - gx[idx]) <= 1e-6 * max(1.0, abs(num))
        for idx in [(0, 0) + (0,) * 3, (2, 1) + tuple(k - 1 for k in kernel)]:
            wp, wm = w.copy(), w.copy()
            wp[idx] += step
            wm[idx] -= step
            num = (np.sum(g * conv_forward_cl(x, wp, pad, stride)) - np.sum(g * conv_forward_cl(x, wm, pad, stride))) / (2 * step)
            assert abs(num - gw[idx]) <= 1e-6 * max(1.0, abs(num))


class TestFlops:
    def test_unit_case(self):
        assert flops_estimate(ConvSpec(1, 1, (1, 1, 1)), (1, 1, 1)) == 2

    def test_closed_form(self):
        spec = ConvSpec(16, 16, (3, 3, 3))
        assert flops_estimate(spec, (16, 32, 32)) == 2 * 16 * 16 * 27 * 16 * 32 * 32

    def test_one_d_is_k_squared_cheaper(self):
        dims = (8, 9, 10)
        full = flops_estimate(ConvSpec(4, 5, (3, 3, 3)), dims)
        one_d = flops_estimate(ConvSpec(4, 5, (1, 1, 3)), dims)
        assert full == 9 * one_d


class TestSpecValidation:
    def test_rejects_mixed_kernel(self):
        with pytest.raises(ShapeError):
            ConvSpec(1, 1, (3, 5, 1))

    def test_rejects_even_kernel(self):
        with pytest.raises(ShapeError):
            ConvSpec(1, 1, (2, 2, 2))

    def test_same_padding_default(self):
        assert ConvSpec(1, 1, (3, 1, 3)).padding == (1, 0, 1)
