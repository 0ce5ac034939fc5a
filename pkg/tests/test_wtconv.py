"""Wavelet depthwise convolution: receptive field, parameter count,
degenerate configurations, and structural properties."""

import numpy as np
import pytest

import oracles
from prnet import ops
from prnet.tensor import Tensor
from prnet.wtconv import WTConvLayer, wtconv_receptive_field


def t(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=grad)


@pytest.mark.parametrize(
    "levels,k,want",
    [(0, 3, 3), (1, 3, 5), (2, 3, 9), (3, 3, 17), (0, 5, 5), (1, 5, 9), (2, 5, 17), (3, 5, 33)],
)
def test_receptive_field_formula(levels, k, want):
    assert wtconv_receptive_field(levels, k) == want


@pytest.mark.parametrize("levels,k,support", [(1, 3, 6), (2, 3, 16), (2, 5, 28), (3, 3, 36)])
def test_impulse_support_bounds_the_effective_field(levels, k, support):
    # Gradient of one output pixel w.r.t. the input marks exactly the pixels
    # that can influence it. With block-decimated subbands the true support
    # is parity-dependent and exceeds the dilated-equivalent figure that
    # wtconv_receptive_field reports, so that formula is a lower bound and
    # the pinned values here are the measured widths at an even-parity pixel.
    size = 64
    layer = WTConvLayer(np.random.default_rng(0), channels=1, kernel_size=k, levels=levels)
    x = t(np.zeros((1, 1, size, size)), grad=True)
    out = layer(x)
    probe = np.zeros(out.shape, dtype=np.float32)
    center = size // 2
    probe[0, 0, center, center] = 1.0
    ops.sum_over(out * t(probe)).backward()
    rows = np.nonzero(np.abs(x.grad[0, 0]).max(axis=1))[0]
    cols = np.nonzero(np.abs(x.grad[0, 0]).max(axis=0))[0]
    assert rows.max() - rows.min() + 1 == support
    assert cols.max() - cols.min() + 1 == support
    assert support >= wtconv_receptive_field(levels, k)


@pytest.mark.parametrize("c,k,levels", [(1, 3, 0), (4, 3, 2), (8, 5, 2), (3, 3, 3), (2, 5, 1)])
def test_parameter_count(c, k, levels):
    layer = WTConvLayer(np.random.default_rng(0), c, k, levels)
    assert layer.num_parameters() == oracles.wtconv_params(c, k, levels)


def test_levels_zero_is_plain_depthwise_conv():
    rng = np.random.default_rng(1)
    layer = WTConvLayer(np.random.default_rng(2), channels=3, kernel_size=3, levels=0)
    x = rng.normal(size=(1, 3, 8, 8)).astype(np.float32)
    got = layer(t(x))
    want = ops.depthwise_conv2d(t(x), layer.base_weight, padding=1)
    np.testing.assert_array_equal(got.data, want.data)


def test_layer_is_linear_in_the_input():
    rng = np.random.default_rng(3)
    layer = WTConvLayer(np.random.default_rng(4), channels=2, kernel_size=3, levels=2)
    a = rng.normal(size=(1, 2, 8, 8)).astype(np.float32)
    b = rng.normal(size=(1, 2, 8, 8)).astype(np.float32)
    f = lambda v: layer(t(v)).data
    np.testing.assert_allclose(f(1.5 * a - 2.0 * b), 1.5 * f(a) - 2.0 * f(b), rtol=1e-4, atol=1e-5)


def test_translation_equivariance_on_interior():
    # Shifting the input by the coarsest-grid stride (2^levels) shifts the
    # output identically, away from the borders.
    levels, k = 2, 3
    shift = 1 << levels
    rng = np.random.default_rng(5)
    layer = WTConvLayer(np.random.default_rng(6), channels=1, kernel_size=k, levels=levels)
    x = rng.normal(size=(1, 1, 32, 32)).astype(np.float32)
    shifted = np.roll(x, (shift, shift), axis=(2, 3))
    out = layer(t(x)).data
    out_shifted = layer(t(shifted)).data
    m = wtconv_receptive_field(levels, k)  # border margin hiding wrap effects
    np.testing.assert_allclose(
        out_shifted[0, 0, m + shift : 32 - m, m + shift : 32 - m],
        out[0, 0, m : 32 - m - shift, m : 32 - m - shift],
        rtol=1e-4,
        atol=1e-5,
    )


def test_output_shape_equals_input_shape():
    layer = WTConvLayer(np.random.default_rng(7), channels=5, kernel_size=5, levels=2)
    x = t(np.random.default_rng(8).normal(size=(2, 5, 12, 16)).astype(np.float32))
    assert layer(x).shape == (2, 5, 12, 16)


def test_channel_mismatch_is_rejected():
    layer = WTConvLayer(np.random.default_rng(9), channels=3, kernel_size=3, levels=1)
    with pytest.raises(ValueError, match="channels"):
        layer(t(np.zeros((1, 2, 8, 8))))


def test_indivisible_extent_error_mentions_padding():
    layer = WTConvLayer(np.random.default_rng(10), channels=1, kernel_size=3, levels=2)
    with pytest.raises(ValueError, match="pad"):
        layer(t(np.zeros((1, 1, 6, 8))))


def test_constructor_validation():
    rng = np.random.default_rng(11)
    with pytest.raises(ValueError, match="odd"):
        WTConvLayer(rng, 2, 4, 1)
    with pytest.raises(ValueError, match="levels"):
        WTConvLayer(rng, 2, 3, 4)
    with pytest.raises(ValueError, match="levels"):
        wtconv_receptive_field(-1, 3)


def test_all_weights_zero_gives_zero_output():
    layer = WTConvLayer(np.random.default_rng(20), channels=2, kernel_size=3, levels=2)
    for _, p in layer.named_parameters():
        p.data = np.zeros_like(p.data)
    x = np.random.default_rng(21).normal(size=(1, 2, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(layer(t(x)).data, np.zeros((1, 2, 8, 8), dtype=np.float32))


def test_delta_kernels_reduce_to_wavelet_roundtrip():
    # Zero base kernel, delta subband kernels, unit gains: the pyramid is
    # idwt(dwt(x)) == x.
    layer = WTConvLayer(np.random.default_rng(22), channels=3, kernel_size=3, levels=1)
    layer.base_weight.data = np.zeros_like(layer.base_weight.data)
    delta = np.zeros_like(layer.subband_weight1.data)
    delta[:, 0, 1, 1] = 1.0
    layer.subband_weight1.data = delta
    layer.subband_gain1.data = np.ones_like(layer.subband_gain1.data)
    x = np.random.default_rng(23).normal(size=(2, 3, 8, 8)).astype(np.float32)
    np.testing.assert_allclose(layer(t(x)).data, x, atol=1e-6)


def test_zeroed_subbands_reduce_to_base_conv():
    # With every subband kernel zeroed the pyramid contributes nothing.
    layer = WTConvLayer(np.random.default_rng(12), channels=2, kernel_size=3, levels=2)
    for w in layer.subband_weights:
        w.data = np.zeros_like(w.data)
    x = np.random.default_rng(13).normal(size=(1, 2, 8, 8)).astype(np.float32)
    got = layer(t(x))
    want = ops.depthwise_conv2d(t(x), layer.base_weight, padding=1)
    np.testing.assert_allclose(got.data, want.data, atol=1e-6)


def test_parameters_are_named_per_level():
    layer = WTConvLayer(np.random.default_rng(14), channels=2, kernel_size=3, levels=2)
    names = {name for name, _ in layer.named_parameters()}
    assert names == {
        "base_weight",
        "subband_weight1",
        "subband_gain1",
        "subband_weight2",
        "subband_gain2",
    }
