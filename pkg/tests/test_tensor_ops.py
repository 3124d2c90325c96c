"""Operator-level tests against naive reference implementations."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchlens.errors import ContractError
from patchlens.tensor_ops import (ConvSpec, Tensor4, activation, add, bilinear_resize,
                                  concat_channels, conv2d, fold_batchnorm, pool2d)

from reference import bilinear_naive, conv2d_naive, max_rel_err, pool2d_naive

rng = np.random.default_rng(1234)


def rand_t4(n, c, h, w, r=None):
    return Tensor4((r or rng).normal(size=(n, c, h, w)))


class TestTensor4:
    def test_shape_and_flat(self):
        t = Tensor4.from_flat(2, 3, 4, 5, np.arange(120.0))
        assert t.shape == (2, 3, 4, 5)
        assert t.flat()[7] == 7.0

    def test_flat_length_mismatch(self):
        with pytest.raises(ContractError, match="needs"):
            Tensor4.from_flat(1, 1, 2, 2, [1.0, 2.0, 3.0])

    def test_nonfinite_rejected(self):
        with pytest.raises(ContractError, match="non-finite"):
            Tensor4(np.array([[[[np.nan]]]]))

    def test_immutable(self):
        t = Tensor4.zeros(1, 1, 2, 2)
        with pytest.raises(ValueError):
            t.values[0, 0, 0, 0] = 1.0
        with pytest.raises(AttributeError):
            t.values = np.zeros((1, 1, 2, 2))

    def test_zero_extent_allowed(self):
        t = Tensor4.zeros(1, 0, 4, 4)
        assert t.c == 0 and t.flat().size == 0


class TestConv2d:
    def test_scalar_scaling(self):
        x = Tensor4.full(1, 1, 3, 3, 1.0)
        spec = ConvSpec(1, 1, 1, 1, 1, 0, weights=np.array([2.0]))
        out = conv2d(x, spec)
        assert out.shape == (1, 1, 3, 3)
        assert np.all(out.values == 2.0)

    def test_diagonal_kernel(self):
        x = Tensor4(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        spec = ConvSpec(1, 1, 2, 2, 1, 0, weights=np.array([1.0, 0.0, 0.0, 1.0]))
        out = conv2d(x, spec)
        assert out.shape == (1, 1, 1, 1)
        assert out.values[0, 0, 0, 0] == 5.0  # 1*1 + 4*1, sliding-window oracle

    def test_identity_kernel(self):
        x = rand_t4(2, 3, 5, 5)
        eye = np.zeros((3, 3, 1, 1))
        for c in range(3):
            eye[c, c, 0, 0] = 1.0
        spec = ConvSpec(3, 3, 1, 1, 1, 0, weights=eye)
        assert np.array_equal(conv2d(x, spec).values, x.values)

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 3), (2, 3, 7), (1, 1, 1)])
    def test_against_naive(self, stride, padding, k):
        r = np.random.default_rng(k * 10 + stride)
        x = r.normal(size=(2, 3, 8, 9))
        w = r.normal(size=(4, 3, k, k))
        b = r.normal(size=4)
        spec = ConvSpec(4, 3, k, k, stride, padding, weights=w, bias=b)
        got = conv2d(Tensor4(x), spec).values
        want = conv2d_naive(x, w, b, stride, padding)
        assert got.shape == want.shape
        assert max_rel_err(got, want) < 1e-12

    def test_channel_mismatch_names_shapes(self):
        x = rand_t4(1, 2, 4, 4)
        spec = ConvSpec(1, 3, 1, 1, 1, 0, weights=np.zeros(3))
        with pytest.raises(ContractError, match=r"2 channels.*expects 3"):
            conv2d(x, spec)

    def test_window_exceeds_input(self):
        x = rand_t4(1, 1, 4, 4)
        spec = ConvSpec(1, 1, 7, 7, 1, 0, weights=np.zeros(49))
        with pytest.raises(ContractError, match="exceeds"):
            conv2d(x, spec)

    def test_linearity(self):
        r = np.random.default_rng(7)
        x, y = r.normal(size=(1, 2, 6, 6)), r.normal(size=(1, 2, 6, 6))
        spec = ConvSpec(3, 2, 3, 3, 1, 1, weights=r.normal(size=(3, 2, 3, 3)))
        lhs = conv2d(Tensor4(2.0 * x + 3.0 * y), spec).values
        rhs = 2.0 * conv2d(Tensor4(x), spec).values + 3.0 * conv2d(Tensor4(y), spec).values
        assert max_rel_err(lhs, rhs) < 1e-12

    def test_deterministic(self):
        x = rand_t4(1, 3, 8, 8)
        spec = ConvSpec(2, 3, 3, 3, 1, 1, weights=rng.normal(size=(2, 3, 3, 3)))
        a = conv2d(x, spec).values
        b = conv2d(x, spec).values
        assert np.array_equal(a, b)


class TestActivation:
    def test_relu_definition(self):
        x = Tensor4(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3))
        assert np.array_equal(activation(x, "relu").values.ravel(), [0.0, 0.0, 2.0])

    def test_leaky_definition(self):
        x = Tensor4(np.array([[[[-10.0]]]]))
        assert activation(x, "leaky_relu", 0.1).values[0, 0, 0, 0] == pytest.approx(-1.0)

    def test_leaky_zero_slope_is_relu(self):
        x = rand_t4(1, 2, 4, 4)
        assert np.array_equal(activation(x, "leaky_relu", 0.0).values,
                              activation(x, "relu").values)

    def test_bad_slope(self):
        with pytest.raises(ContractError):
            activation(rand_t4(1, 1, 2, 2), "leaky_relu", 1.0)


class TestPool2d:
    def test_max_2x2(self):
        x = Tensor4(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert pool2d(x, "max", 2, 2).values[0, 0, 0, 0] == 4.0

    def test_avg_constant_preserved(self):
        x = Tensor4.full(1, 2, 5, 5, 3.25)
        out = pool2d(x, "avg", 3, 1, 1)
        assert np.allclose(out.values, 3.25)  # divisor excludes padding

    def test_avg_single_center(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 9.0
        out = pool2d(Tensor4(x), "avg", 3, 1, 1)
        assert out.values[0, 0, 1, 1] == pytest.approx(1.0)

    @pytest.mark.parametrize("kind", ["max", "avg"])
    @pytest.mark.parametrize("k,s,p", [(2, 2, 0), (3, 1, 1), (3, 2, 1)])
    def test_against_naive(self, kind, k, s, p):
        r = np.random.default_rng(k + s)
        x = r.normal(size=(2, 2, 7, 8))
        got = pool2d(Tensor4(x), kind, k, s, p).values
        want = pool2d_naive(x, kind, k, s, p)
        assert max_rel_err(got, want) < 1e-12

    def test_floor_extents(self):
        # 128 -> 64 through a 3x3/2 window with padding 1 (stride schedule)
        out = pool2d(rand_t4(1, 1, 128, 128), "max", 3, 2, 1)
        assert out.shape == (1, 1, 64, 64)


class TestBilinearResize:
    def test_constant_upsample(self):
        out = bilinear_resize(Tensor4.full(1, 1, 4, 4, 5.0), 8, 8)
        assert np.all(out.values == 5.0)

    def test_identity_resize(self):
        x = rand_t4(1, 3, 6, 7)
        assert np.array_equal(bilinear_resize(x, 6, 7).values, x.values)

    def test_single_source(self):
        out = bilinear_resize(Tensor4.full(1, 1, 1, 1, -2.5), 5, 9)
        assert np.all(out.values == -2.5)

    @pytest.mark.parametrize("oh,ow", [(8, 8), (3, 5), (16, 4)])
    def test_against_naive(self, oh, ow):
        x = rng.normal(size=(1, 2, 6, 7))
        got = bilinear_resize(Tensor4(x), oh, ow).values
        want = bilinear_naive(x, oh, ow)
        assert max_rel_err(got, want) < 1e-12

    def test_convexity_upper_bound(self):
        x = rand_t4(1, 1, 16, 16)
        up = bilinear_resize(x, 256, 256)
        assert up.values.max() <= x.values.max() + 1e-12

    def test_odd_ratio_hits_sources_exactly(self):
        # odd integer ratios place output samples on input samples
        x = rand_t4(1, 1, 16, 16)
        up = bilinear_resize(x, 48, 48)
        assert up.values.max() == pytest.approx(x.values.max(), abs=1e-12)


class TestConcatAdd:
    def test_concat_384(self):
        a, b = rand_t4(1, 128, 16, 16), rand_t4(1, 256, 16, 16)
        out = concat_channels(a, b)
        assert out.shape == (1, 384, 16, 16)

    def test_concat_empty_neutral(self):
        a = rand_t4(1, 3, 4, 4)
        out = concat_channels(a, Tensor4.zeros(1, 0, 4, 4))
        assert np.array_equal(out.values, a.values)

    def test_concat_channel_order(self):
        a, b = rand_t4(1, 2, 3, 3), rand_t4(1, 2, 3, 3)
        out = concat_channels(a, b)
        assert np.array_equal(out.values[:, 0], a.values[:, 0])
        assert np.array_equal(out.values[:, 2], b.values[:, 0])

    def test_concat_mismatch_names_shapes(self):
        with pytest.raises(ContractError, match=r"\(1, 2, 3, 3\).*\(1, 2, 4, 4\)"):
            concat_channels(rand_t4(1, 2, 3, 3), rand_t4(1, 2, 4, 4))

    def test_add(self):
        a, b = rand_t4(1, 2, 3, 3), rand_t4(1, 2, 3, 3)
        assert np.array_equal(add(a, b).values, a.values + b.values)


class TestFoldBatchnorm:
    def _spec(self, r):
        return ConvSpec(3, 2, 3, 3, 1, 1, weights=r.normal(size=(3, 2, 3, 3)),
                        bias=r.normal(size=3))

    def test_identity_normalization(self):
        spec = self._spec(np.random.default_rng(0))
        folded = fold_batchnorm(spec, np.ones(3), np.zeros(3), np.zeros(3),
                                np.ones(3), eps=0.0)
        assert np.allclose(folded.weights, spec.weights)
        assert np.allclose(folded.bias, spec.bias)

    def test_pure_scale(self):
        spec = self._spec(np.random.default_rng(1))
        folded = fold_batchnorm(spec, 2.0 * np.ones(3), np.zeros(3), np.zeros(3),
                                np.ones(3), eps=0.0)
        assert np.allclose(folded.weights, 2.0 * spec.weights)

    def test_two_stage_equivalence(self):
        r = np.random.default_rng(2)
        spec = self._spec(r)
        gamma, beta = r.normal(size=3), r.normal(size=3)
        mean, var = r.normal(size=3), r.uniform(0.5, 2.0, size=3)
        eps = 1e-5
        folded = fold_batchnorm(spec, gamma, beta, mean, var, eps)
        x = Tensor4(r.normal(size=(1, 2, 4, 4)))
        raw = conv2d(x, spec).values
        two_stage = (raw - mean[None, :, None, None]) / np.sqrt(
            var[None, :, None, None] + eps) * gamma[None, :, None, None] \
            + beta[None, :, None, None]
        assert max_rel_err(conv2d(x, folded).values, two_stage) < 1e-5

    def test_negative_variance(self):
        spec = self._spec(np.random.default_rng(3))
        with pytest.raises(ContractError, match="variance"):
            fold_batchnorm(spec, np.ones(3), np.zeros(3), np.zeros(3),
                           -np.ones(3), eps=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(4, 9), st.integers(4, 9),
       st.integers(0, 2 ** 31 - 1))
def test_ops_preserve_shape_and_finiteness(n, c, h, w, seed):
    x = Tensor4(np.random.default_rng(seed).normal(size=(n, c, h, w)))
    for out in (activation(x, "relu"), activation(x, "leaky_relu", 0.2),
                bilinear_resize(x, h, w), add(x, x)):
        assert out.shape[0] == n
        assert np.isfinite(out.values).all()
    const = bilinear_resize(Tensor4.full(n, c, h, w, 1.5), h * 2 + 1, w + 3)
    assert np.max(np.abs(const.values - 1.5)) < 1e-6
