import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdcnet.sdconv import (
    ConvParams,
    ConvSpec,
    DilationVector,
    effective_tap_offsets,
    expand_kernel,
    receptive_field,
    sdconv_backward,
    sdconv_direct,
    sdconv_forward,
    standard_conv2d,
)
from sdcnet.tensor import ShapeError


def loop_conv(x, spec, params):
    """Scalar loops straight from the defining sum (float64)."""
    ph, pw = spec.pads
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    d_h, d_w = spec.dilation
    out = np.zeros((x.shape[0], spec.out_channels, ho, wo))
    for b, o, y, z in np.ndindex(*out.shape):
        acc = float(params.bias[o])
        for c, i, j in np.ndindex(spec.in_channels, spec.k, spec.k):
            acc += float(params.weights[o, c, i, j]) * xp[b, c, y + i * d_h, z + j * d_w]
        out[b, o, y, z] = acc
    return out


def make_case(rng, k, d, cin=2, cout=3, h=9, w=20, b=2, padding="same", dtype=np.float32):
    spec = ConvSpec(k, d, cin, cout, padding)
    params = ConvParams(
        (rng.standard_normal((cout, cin, k, k)) / np.sqrt(cin * k * k)).astype(dtype),
        rng.standard_normal(cout).astype(dtype),
    )
    return rng.standard_normal((b, cin, h, w)).astype(dtype), spec, params


class TestReceptiveField:
    def test_worked_example(self):
        assert receptive_field(5, DilationVector(2, 16)) == (9, 65)

    def test_standard(self):
        assert receptive_field(3, (1, 1)) == (3, 3)

    def test_row_dilation_four(self):
        # (k-1)*d_w + 1 = 2*4 + 1
        assert receptive_field(3, (1, 4)) == (3, 9)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([1, 3, 5, 7]), st.integers(1, 4), st.integers(1, 16))
    def test_matches_tap_extent(self, k, d_h, d_w):
        taps = effective_tap_offsets(ConvSpec(k, (d_h, d_w), 1, 1))
        ys, xs = zip(*taps)
        assert receptive_field(k, (d_h, d_w)) == (max(ys) + 1, max(xs) + 1)


class TestTapOffsets:
    def test_contiguous(self):
        taps = effective_tap_offsets(ConvSpec(3, (1, 1), 1, 1))
        assert taps == [(i, j) for i in range(3) for j in range(3)]

    def test_column_gaps(self):
        taps = effective_tap_offsets(ConvSpec(3, (1, 2), 1, 1))
        assert sorted({x for _, x in taps}) == [0, 2, 4]
        assert sorted({y for y, _ in taps}) == [0, 1, 2]

    def test_centered(self):
        taps = effective_tap_offsets(ConvSpec(5, (2, 16), 1, 1), centered=True)
        assert taps[0] == (-4, -32) and taps[-1] == (4, 32) and (0, 0) in taps

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([1, 3, 5]), st.integers(1, 5), st.integers(1, 20))
    def test_count(self, k, d_h, d_w):
        taps = effective_tap_offsets(ConvSpec(k, (d_h, d_w), 1, 1))
        assert len(taps) == len(set(taps)) == k * k


class TestForward:
    @pytest.mark.parametrize("d", [(1, 1), (1, 2), (2, 16), (1, 8)])
    def test_delta_kernel_is_identity(self, rng, d):
        x = rng.standard_normal((2, 3, 8, 12)).astype(np.float32)
        w = np.zeros((3, 3, 5, 5), np.float32)
        for c in range(3):
            w[c, c, 2, 2] = 1.0
        out = sdconv_forward(x, ConvSpec(5, d, 3, 3), ConvParams(w, np.zeros(3, np.float32)))
        assert np.array_equal(out, x)

    @pytest.mark.parametrize("padding", ["same", "valid"])
    @pytest.mark.parametrize("k,d", [(3, (1, 1)), (3, (1, 4)), (5, (2, 3)), (1, (3, 3))])
    def test_against_scalar_loops(self, rng, padding, k, d):
        x, spec, params = make_case(rng, k, d, h=11, w=17, padding=padding)
        ref = loop_conv(x, spec, params)
        assert np.abs(sdconv_forward(x, spec, params) - ref).max() <= 1e-5
        assert np.abs(sdconv_direct(x, spec, params) - ref).max() <= 1e-10

    def test_zero_expansion_equivalence(self, rng):
        for _ in range(10):
            k = int(rng.choice([3, 5]))
            d = (int(rng.choice([1, 2])), int(rng.choice([1, 2, 4, 8, 16])))
            x, spec, params = make_case(rng, k, d, h=int(rng.integers(3, 12)), w=int(rng.integers(3, 40)))
            ref = standard_conv2d(x, expand_kernel(params, d))
            assert np.abs(sdconv_forward(x, spec, params) - ref).max() <= 1e-5

    def test_same_padding_keeps_shape(self, rng):
        x, spec, params = make_case(rng, 5, (2, 16), h=6, w=10)
        assert sdconv_forward(x, spec, params).shape == (2, 3, 6, 10)

    def test_float64_path(self, rng):
        x, spec, params = make_case(rng, 3, (2, 4), dtype=np.float64)
        out = sdconv_forward(x, spec, params)
        assert out.dtype == np.float64
        assert np.abs(out - loop_conv(x, spec, params)).max() <= 1e-12

    def test_linearity(self, rng):
        x1, spec, p1 = make_case(rng, 3, (1, 8))
        x2, _, p2 = make_case(rng, 3, (1, 8))
        a, b = 0.7, -1.3
        zero_b = np.zeros(3, np.float32)
        f = lambda x, w: sdconv_forward(x, spec, ConvParams(w, zero_b))
        lhs = f(a * x1 + b * x2, p1.weights)
        assert np.abs(lhs - (a * f(x1, p1.weights) + b * f(x2, p1.weights))).max() <= 1e-5
        lhs = f(x1, a * p1.weights + b * p2.weights)
        assert np.abs(lhs - (a * f(x1, p1.weights) + b * f(x1, p2.weights))).max() <= 1e-5

    def test_errors(self, rng):
        x, spec, params = make_case(rng, 5, (1, 16), w=20)
        with pytest.raises(ShapeError):
            sdconv_forward(x[:, :1], spec, params)
        valid = ConvSpec(5, (1, 16), 2, 3, "valid")
        with pytest.raises(ShapeError):
            sdconv_forward(x, valid, params)  # 20 columns < 65
        with pytest.raises(ShapeError):
            sdconv_forward(x, spec, ConvParams(params.weights[:, :, :3, :3], params.bias))
        with pytest.raises(ValueError):
            ConvSpec(4, (1, 1), 1, 1)
        with pytest.raises(ValueError):
            ConvSpec(3, (0, 1), 1, 1)

    def test_param_count_independent_of_dilation(self, rng):
        counts = set()
        for d in [(1, 1), (1, 16), (2, 8)]:
            _, spec, params = make_case(rng, 5, d)
            counts.add(params.n_params)
        assert counts == {3 * 2 * 25 + 3}


class TestReferenceConvs:
    """Degenerate dilations against an independent deep-learning library."""

    torch = pytest.importorskip("torch")

    def _torch_conv(self, x, params, dilation, pad):
        t = self.torch
        out = t.nn.functional.conv2d(
            t.from_numpy(x.astype(np.float64)),
            t.from_numpy(params.weights.astype(np.float64)),
            t.from_numpy(params.bias.astype(np.float64)),
            padding=pad,
            dilation=dilation,
        )
        return out.numpy()

    @pytest.mark.parametrize("k", [3, 5])
    def test_unit_dilation_is_standard_conv(self, rng, k):
        x, spec, params = make_case(rng, k, (1, 1))
        ref = self._torch_conv(x, params, 1, (k - 1) // 2)
        assert np.abs(sdconv_forward(x, spec, params) - ref).max() <= 1e-5

    @pytest.mark.parametrize("k", [3, 5])
    def test_equal_dilation_is_dilated_conv(self, rng, k):
        x, spec, params = make_case(rng, k, (2, 2), h=12, w=14)
        ref = self._torch_conv(x, params, 2, k - 1)
        assert np.abs(sdconv_forward(x, spec, params) - ref).max() <= 1e-5

    def test_anisotropic_dilation(self, rng):
        x, spec, params = make_case(rng, 3, (1, 4))
        ref = self._torch_conv(x, params, (1, 4), (1, 4))
        assert np.abs(sdconv_forward(x, spec, params) - ref).max() <= 1e-5


class TestExpandKernel:
    def test_unit_dilation_unchanged(self, rng):
        _, _, params = make_case(rng, 3, (1, 1))
        assert np.array_equal(expand_kernel(params, (1, 1)).weights, params.weights)

    def test_interleaved_zero_columns(self, rng):
        _, _, params = make_case(rng, 3, (1, 2))
        big = expand_kernel(params, (1, 2)).weights
        assert big.shape[2:] == (3, 5)
        assert not big[:, :, :, 1::2].any()
        assert np.array_equal(big[:, :, :, ::2], params.weights)

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from([3, 5]), st.integers(1, 3), st.integers(1, 16))
    def test_nonzero_count(self, k, d_h, d_w):
        w = np.random.default_rng(k * d_h * d_w).uniform(0.5, 1.0, (1, 1, k, k))
        big = expand_kernel(ConvParams(w, np.zeros(1)), (d_h, d_w)).weights
        assert np.count_nonzero(big) == k * k
        assert big.shape[2:] == receptive_field(k, (d_h, d_w))


class TestBackward:
    def test_zero_upstream(self, rng):
        x, spec, params = make_case(rng, 3, (1, 4))
        gx, gw, gb = sdconv_backward(x, spec, params, np.zeros((2, 3, 9, 20), np.float32))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_bias_gradient(self, rng):
        x, spec, params = make_case(rng, 3, (1, 2))
        g = rng.standard_normal((2, 3, 9, 20)).astype(np.float32)
        _, _, gb = sdconv_backward(x, spec, params, g)
        assert np.allclose(gb, g.sum(axis=(0, 2, 3)), atol=1e-4)

    def test_shape_check(self, rng):
        x, spec, params = make_case(rng, 3, (1, 2))
        with pytest.raises(ShapeError):
            sdconv_backward(x, spec, params, np.zeros((2, 3, 9, 19), np.float32))

    @pytest.mark.parametrize("padding", ["same", "valid"])
    @pytest.mark.parametrize("k,d", [(3, (1, 1)), (3, (2, 4)), (5, (1, 2))])
    def test_float64_finite_differences(self, rng, padding, k, d):
        x, spec, params = make_case(rng, k, d, h=10, w=13, padding=padding, dtype=np.float64)
        g = rng.standard_normal(sdconv_forward(x, spec, params).shape)
        gx, gw, gb = sdconv_backward(x, spec, params, g)
        loss = lambda: float(np.sum(sdconv_direct(x, spec, params) * g))
        h = 1e-5
        for arr, grad in ((x, gx), (params.weights, gw), (params.bias, gb)):
            flat = arr.reshape(-1)
            for i in rng.choice(flat.size, size=min(8, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                hi = loss()
                flat[i] = orig - h
                lo = loss()
                flat[i] = orig
                num = (hi - lo) / (2 * h)
                assert abs(grad.reshape(-1)[i] - num) <= 1e-6 * max(1.0, abs(num))

    def test_input_grad_is_adjoint(self, rng):
        """<conv(x), g> == <x, conv^T(g)> with zero bias."""
        x, spec, params = make_case(rng, 5, (2, 8), h=12, w=30, dtype=np.float64)
        params.bias[:] = 0
        g = rng.standard_normal(sdconv_forward(x, spec, params).shape)
        gx, _, _ = sdconv_backward(x, spec, params, g)
        assert np.isclose(np.sum(sdconv_forward(x, spec, params) * g), np.sum(x * gx), rtol=1e-12)

    def test_support_matches_taps(self, rng):
        x, spec, params = make_case(rng, 3, (1, 4), h=3, w=9, padding="valid", dtype=np.float64)
        g = np.zeros((2, 3, 1, 1))
        g[0, 0, 0, 0] = 1
        gx, _, _ = sdconv_backward(x, spec, params, g)
        support = {tuple(p) for p in np.argwhere(np.any(gx[0] != 0, axis=0))}
        assert support == set(effective_tap_offsets(spec))
        assert not gx[1].any()

    def test_skip_input_grad(self, rng):
        x, spec, params = make_case(rng, 3, (1, 2))
        g = rng.standard_normal((2, 3, 9, 20)).astype(np.float32)
        gx, gw, _ = sdconv_backward(x, spec, params, g, need_input_grad=False)
        assert gx is None
        assert np.array_equal(gw, sdconv_backward(x, spec, params, g)[1])
