"""Single-level and pyramidal 2-D Haar wavelet transforms.

Orthonormal convention: for each 2x2 block [a, b; c, d] (row-major),

    LL = (a + b + c + d) / 2      LH = (a + b - c - d) / 2
    HL = (a - b + c - d) / 2      HH = (a - b - c + d) / 2

i.e. the high-pass filter (1, -1)/sqrt(2) runs along height for LH and
along width for HL. The transform is orthogonal, so its adjoint equals its
inverse; the backward pass of the analysis step is the synthesis step
applied to the gradients, and vice versa.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, make_result


def _split_blocks(x: np.ndarray):
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return a, b, c, d


def _dwt_data(x: np.ndarray) -> np.ndarray:
    """Forward transform, subbands stacked on the channel axis as
    [LL | LH | HL | HH], each C channels wide."""
    a, b, c, d = _split_blocks(x)
    half = np.asarray(0.5, dtype=x.dtype)
    ll = (a + b + c + d) * half
    lh = (a + b - c - d) * half
    hl = (a - b + c - d) * half
    hh = (a - b - c + d) * half
    return np.concatenate([ll, lh, hl, hh], axis=1)


def _idwt_data(s: np.ndarray) -> np.ndarray:
    c4 = s.shape[1]
    c = c4 // 4
    ll, lh, hl, hh = s[:, :c], s[:, c : 2 * c], s[:, 2 * c : 3 * c], s[:, 3 * c :]
    half = np.asarray(0.5, dtype=s.dtype)
    n, _, h, w = ll.shape
    out = np.empty((n, c, 2 * h, 2 * w), dtype=s.dtype)
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) * half
    out[..., 0::2, 1::2] = (ll + lh - hl - hh) * half
    out[..., 1::2, 0::2] = (ll - lh + hl - hh) * half
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) * half
    return out


def haar_dwt2_stacked(x: Tensor) -> Tensor:
    """One analysis level; returns (N, 4C, H/2, W/2) with subbands stacked
    channel-wise in LL, LH, HL, HH order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"haar_dwt2 requires even spatial extents, got {h}x{w}")

    def bwd(g):
        return (_idwt_data(g),)

    return make_result(_dwt_data(x.data), (x,), bwd, "haar_dwt2")


def haar_idwt2_stacked(s: Tensor) -> Tensor:
    """One synthesis level from stacked subbands (N, 4C, h, w) -> (N, C, 2h, 2w)."""
    if s.shape[1] % 4:
        raise ValueError(f"stacked subbands need a channel count divisible by 4, got {s.shape[1]}")

    def bwd(g):
        return (_dwt_data(g),)

    return make_result(_idwt_data(s.data), (s,), bwd, "haar_idwt2")


def haar_dwt2(x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Single-level 2-D Haar analysis: (N, C, H, W) -> four (N, C, H/2, W/2)
    subbands (LL, LH, HL, HH)."""
    stacked = haar_dwt2_stacked(x)
    c = x.shape[1]
    return (
        ops.slice_channels(stacked, 0, c),
        ops.slice_channels(stacked, c, 2 * c),
        ops.slice_channels(stacked, 2 * c, 3 * c),
        ops.slice_channels(stacked, 3 * c, 4 * c),
    )


def haar_idwt2(ll: Tensor, lh: Tensor, hl: Tensor, hh: Tensor) -> Tensor:
    """Single-level 2-D Haar synthesis, the exact inverse of :func:`haar_dwt2`."""
    if not (ll.shape == lh.shape == hl.shape == hh.shape):
        raise ValueError(
            "subband shapes must match, got "
            f"{ll.shape}, {lh.shape}, {hl.shape}, {hh.shape}"
        )
    return haar_idwt2_stacked(ops.concat_channels([ll, lh, hl, hh]))


@dataclass
class WaveletPyramid:
    """Multi-level decomposition; ``levels[l]`` holds the subbands produced by
    re-analyzing the LL band of level ``l-1`` (level 0 analyzes the input)."""

    levels: list[dict[str, Tensor]]

    def __len__(self) -> int:
        return len(self.levels)


def dwt_pyramid(x: Tensor, levels: int) -> WaveletPyramid:
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    n, c, h, w = x.shape
    if h % (1 << levels) or w % (1 << levels):
        raise ValueError(
            f"spatial extents {h}x{w} must be divisible by 2^{levels} = {1 << levels}"
        )
    out: list[dict[str, Tensor]] = []
    cur = x
    for _ in range(levels):
        ll, lh, hl, hh = haar_dwt2(cur)
        out.append({"LL": ll, "LH": lh, "HL": hl, "HH": hh})
        cur = ll
    return WaveletPyramid(out)
