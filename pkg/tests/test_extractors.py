import numpy as np
import pytest

from hsdenoise.autodiff import Parameter, Tape, Var, backward, l1_loss
from hsdenoise.conv import ConvSpec
from hsdenoise.errors import ConfigError, ShapeError
from hsdenoise.extractors import (
    CANONICAL_BRANCH_ORDER,
    ConvLayer,
    ExtractorBlock,
    block_flops,
    block_param_count,
    make_extractor,
)
from hsdenoise.kernel_analysis import (
    SCHEMES,
    build_kernel_matrix,
    count_biases,
    count_params,
    kernel_matrix_apply,
)
from hsdenoise.conv import KernelSet


def cl(x):
    """channels-first -> channels-last"""
    return np.ascontiguousarray(np.moveaxis(x, 0, -1))


def cf(x):
    return np.ascontiguousarray(np.moveaxis(x, -1, 0))


def run_block(block, x_cf):
    return cf(block.forward(None, Var(cl(x_cf))).value)


class TestShapes:
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_uniform_output_shape(self, scheme):
        rng = np.random.default_rng(0)
        block = make_extractor(scheme, 3, 5, rng=rng, dtype=np.float64)
        x = rng.standard_normal((3, 4, 6, 6))
        out = run_block(block, x)
        assert out.shape == (5, 4, 6, 6)

    def test_channel_mismatch(self):
        block = make_extractor("conv3d", 3, 5, rng=np.random.default_rng(0))
        with pytest.raises(ShapeError):
            block.forward(None, Var(np.zeros((4, 6, 6, 2))))

    def test_compression_presence_enforced(self):
        block = make_extractor("reconvset", 2, 2, rng=np.random.default_rng(0))
        with pytest.raises(ConfigError):
            ExtractorBlock("reconvset", 2, 2, 3, block.layers, None)
        seq = make_extractor("seq1d", 2, 2, rng=np.random.default_rng(0))
        with pytest.raises(ConfigError):
            ExtractorBlock("seq1d", 2, 2, 3, seq.layers, block.compression)


class TestReConvSetSemantics:
    def test_zero_compression_gives_zero_output(self):
        rng = np.random.default_rng(1)
        block = make_extractor("reconvset", 2, 3, rng=rng, dtype=np.float64, activation=None)
        block.compression.weight.value[...] = 0.0
        block.compression.bias.value[...] = 0.0
        x = rng.standard_normal((2, 4, 5, 5))
        assert not run_block(block, x).any()

    def test_selector_compression_picks_single_branch(self):
        rng = np.random.default_rng(2)
        m = 3
        block = make_extractor("reconvset", 2, m, rng=rng, dtype=np.float64, activation=None)
        # selector: output m-th channel = horizontal branch's m-th channel
        sel = np.zeros((m, 3 * m, 1, 1, 1))
        for i in range(m):
            sel[i, 2 * m + i] = 1.0  # horizontal block is third in concat order
        block.compression.weight.value[...] = sel
        block.compression.bias.value[...] = 0.0
        x = rng.standard_normal((2, 4, 5, 5))
        got = run_block(block, x)
        horizontal = next(l for l in block.layers if l.role == "horizontal")
        want = cf(horizontal.forward(None, Var(cl(x))).value)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_pre_compression_matches_kernel_matrix_path(self):
        rng = np.random.default_rng(3)
        m, c, k = 3, 2, 3
        block = make_extractor("reconvset", c, m, rng=rng, dtype=np.float64, bias=False)
        kernels = [KernelSet(l.weight.value, None) for l in block.layers]
        ukm = build_kernel_matrix("reconvset", kernels, m, c, k)
        x = rng.standard_normal((c, 4, 6, 5))
        stacked = cf(block.pre_compression(None, Var(cl(x))).value)
        via_matrix = kernel_matrix_apply(ukm, x, mode="same")
        assert np.allclose(stacked, via_matrix, rtol=1e-10, atol=1e-12)

    def test_branch_permutation_is_bit_identical(self):
        rng = np.random.default_rng(4)
        m, c = 3, 2
        block = make_extractor("reconvset", c, m, rng=rng, dtype=np.float64)
        # permute stored branch order to (horizontal, spectral, vertical) and
        # move the compression column blocks the same way
        perm = [2, 0, 1]
        w = block.compression.weight.value
        blocks = [w[:, i * m : (i + 1) * m] for i in range(3)]
        permuted_weight = np.concatenate([blocks[i] for i in perm], axis=1)
        permuted = ExtractorBlock(
            scheme="reconvset",
            in_channels=c,
            out_channels=m,
            k=3,
            layers=[block.layers[i] for i in perm],
            compression=ConvLayer(
                "compress",
                block.compression.spec,
                Parameter("p.compress.weight", permuted_weight),
                block.compression.bias,
            ),
            activation=block.activation,
        )
        x = rng.standard_normal((c, 4, 5, 6))
        a = run_block(block, x)
        b = run_block(permuted, x)
        assert np.array_equal(a, b)


class TestParamCounts:
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_matches_closed_form_at_paper_scale(self, scheme):
        block = make_extractor(scheme, 16, 16, rng=np.random.default_rng(5))
        has_comp = block.compression is not None
        assert block.weight_count() == count_params(scheme, 16, 16, 3, has_comp)
        assert block.bias_count() == count_biases(scheme, 16, has_comp)
        assert block_param_count(block) == block.weight_count() + block.bias_count()

    def test_reconvset_below_conv3d(self):
        rc = make_extractor("reconvset", 16, 16, rng=np.random.default_rng(6))
        c3 = make_extractor("conv3d", 16, 16, rng=np.random.default_rng(6))
        assert block_param_count(rc) < block_param_count(c3)

    def test_seq1d_has_fewest_params(self):
        counts = {
            s: block_param_count(make_extractor(s, 16, 16, rng=np.random.default_rng(7)))
            for s in SCHEMES
        }
        assert min(counts, key=counts.get) == "seq1d"

    def test_flops_ordering(self):
        dims = (8, 16, 16)
        flops = {
            s: block_flops(make_extractor(s, 16, 16, rng=np.random.default_rng(8)), dims)
            for s in SCHEMES
        }
        assert max(flops, key=flops.get) == "conv3d"
        assert min(flops, key=flops.get) == "seq1d"


class TestGradients:
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_finite_difference_through_block(self, scheme):
        rng = np.random.default_rng(9)
        block = make_extractor(scheme, 2, 3, rng=rng, dtype=np.float64, name=scheme)
        params = block.parameters()
        x = rng.standard_normal((4, 6, 6, 2))

        tape = Tape()
        tape.watch(params)
        out = block.forward(tape, tape.input(x))
        # target offset keeps residuals away from both L1 and LeakyReLU kinks
        target = out.value + np.where(rng.standard_normal(out.value.shape) >= 0, -1.0, 1.0)
        loss = l1_loss(tape, out, target)
        grads = backward(tape, loss)

        def f():
            out2 = block.forward(None, Var(x)).value
            return float(np.mean(np.abs(out2 - target)))

        step = 1e-5
        rng_idx = np.random.default_rng(10)
        for p in params:
            g = grads[p.name]
            flat_idx = rng_idx.integers(0, p.value.size, size=min(3, p.value.size))
            for fi in flat_idx:
                idx = np.unravel_index(fi, p.value.shape)
                if abs(g[idx]) <= 1e-8:
                    continue
                orig = p.value[idx]
                p.value[idx] = orig + step
                fp = f()
                p.value[idx] = orig - step
                fm = f()
                p.value[idx] = orig
                num = (fp - fm) / (2 * step)
                assert abs(num - g[idx]) <= 1e-4 * max(1.0, abs(num)), (scheme, p.name, idx)


def test_canonical_orders_are_fixed():
    assert CANONICAL_BRANCH_ORDER["reconvset"] == ("spectral", "vertical", "horizontal")
    assert CANONICAL_BRANCH_ORDER["par1d2d"] == ("spatial2d", "spectral")
