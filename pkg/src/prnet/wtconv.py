"""Wavelet-domain depthwise convolution with a pyramid-enlarged receptive field.

The layer runs a small depthwise kernel over each Haar subband at every
pyramid level, scales each subband by a learnable per-channel gain, recurses
into the (convolved) low-pass band, and resynthesizes on the way back up.
A plain depthwise convolution of the untransformed input is added at the end.
Because a k x k kernel at level l acts on a 2^l-times-decimated grid, the
effective receptive field grows to 2^levels * (k - 1) + 1 per axis while the
parameter count stays linear in the channel count.
"""

from __future__ import annotations

import numpy as np

from . import nn, ops, wavelet
from .tensor import Tensor


def wtconv_receptive_field(levels: int, k: int) -> int:
    """Effective receptive field along one axis."""
    if levels < 0:
        raise ValueError(f"levels must be >= 0, got {levels}")
    return (1 << levels) * (k - 1) + 1


class WTConvLayer(nn.Module):
    """Depthwise wavelet convolution; output shape equals input shape.

    Parameters per layer: one base kernel (C, 1, k, k), and per level one
    stacked subband kernel (4C, 1, k, k) plus a gain vector (4C,) covering
    the LL, LH, HL, HH bands of that level. Total:
    C*k^2*(1 + 4*levels) + 4*levels*C.
    """

    def __init__(self, rng: np.random.Generator, channels: int, kernel_size: int, levels: int = 2):
        super().__init__()
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
        if not 0 <= levels <= 3:
            raise ValueError(f"levels must be in [0, 3], got {levels}")
        self.channels = channels
        self.kernel_size = kernel_size
        self.levels = levels
        k = kernel_size
        self.base_weight = nn.kaiming_uniform(rng, (channels, 1, k, k), k * k)
        weights, gains = [], []
        for lvl in range(levels):
            w = nn.kaiming_uniform(rng, (4 * channels, 1, k, k), k * k)
            g = nn.ones(4 * channels)
            setattr(self, f"subband_weight{lvl + 1}", w)
            setattr(self, f"subband_gain{lvl + 1}", g)
            weights.append(w)
            gains.append(g)
        self.subband_weights = weights
        self.subband_gains = gains

    def receptive_field(self) -> int:
        return wtconv_receptive_field(self.levels, self.kernel_size)

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        step = 1 << self.levels
        if self.levels and (h % step or w % step):
            raise ValueError(
                f"spatial extents {h}x{w} must be divisible by 2^levels = {step}; "
                "pad the input before calling"
            )
        pad = (self.kernel_size - 1) // 2
        base = ops.depthwise_conv2d(x, self.base_weight, padding=pad)
        if self.levels == 0:
            return base
        return ops.add(base, self._pyramid(x, 0))

    def _pyramid(self, cur: Tensor, level: int) -> Tensor:
        c = self.channels
        pad = (self.kernel_size - 1) // 2
        stacked = wavelet.haar_dwt2_stacked(cur)
        conved = ops.conv2d(
            stacked, self.subband_weights[level], padding=pad, groups=4 * c
        )
        gain = ops.reshape(self.subband_gains[level], (1, 4 * c, 1, 1))
        scaled = ops.mul(conved, gain)
        if level + 1 < self.levels:
            ll = ops.slice_channels(scaled, 0, c)
            deeper = self._pyramid(ll, level + 1)
            scaled = ops.concat_channels(
                [ops.add(ll, deeper), ops.slice_channels(scaled, c, 4 * c)]
            )
        return wavelet.haar_idwt2_stacked(scaled)
