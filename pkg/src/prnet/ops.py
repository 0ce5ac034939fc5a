"""Differentiable layer primitives over :class:`prnet.tensor.Tensor`.

Convolution is cross-correlation (no kernel flip) and is computed as a sum
of per-kernel-offset GEMMs: for every (ki, kj) one matrix product between
the weight slice and a shifted view of the padded input. This keeps memory
at O(input) instead of the O(k^2 * input) of im2col while hitting BLAS for
the inner products, and the fixed offset order makes results deterministic.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return make_result(out, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data / b.data

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return make_result(out, (a, b), bwd, "div")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = t.shape

    def bwd(g):
        return (g.reshape(src),)

    return make_result(t.data.reshape(shape), (t,), bwd, "reshape")


def transpose_axes(t: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return make_result(np.ascontiguousarray(t.data.transpose(axes)), (t,), bwd, "transpose")


def concat_channels(tensors, axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_result(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd, "concat"
    )


def slice_channels(t: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g):
        full = np.zeros(t.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make_result(np.ascontiguousarray(t.data[:, start:stop]), (t,), bwd, "slice_channels")


def permute_channels(t: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder axis 1 by a permutation; backward applies the inverse."""
    perm = np.asarray(perm)
    inverse = np.argsort(perm)

    def bwd(g):
        return (np.ascontiguousarray(g[:, inverse]),)

    return make_result(np.ascontiguousarray(t.data[:, perm]), (t,), bwd, "permute_channels")


def pad2d(t: Tensor, pad_bottom: int, pad_right: int) -> Tensor:
    """Zero-pad the two trailing (spatial) dims on the bottom/right edges."""
    n, c, h, w = t.shape

    def bwd(g):
        return (np.ascontiguousarray(g[:, :, :h, :w]),)

    out = np.pad(t.data, ((0, 0), (0, 0), (0, pad_bottom), (0, pad_right)))
    return make_result(out, (t,), bwd, "pad2d")


def crop2d(t: Tensor, height: int, width: int) -> Tensor:
    """Crop the two trailing dims to (height, width) from the top-left."""

    def bwd(g):
        full = np.zeros(t.shape, dtype=g.dtype)
        full[:, :, :height, :width] = g
        return (full,)

    return make_result(np.ascontiguousarray(t.data[:, :, :height, :width]), (t,), bwd, "crop2d")


def sum_over(t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = tuple(range(t.ndim)) if axes is None else tuple(np.atleast_1d(axes))

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, t.shape).copy(),)

    return make_result(t.data.sum(axis=axes, keepdims=keepdims), (t,), bwd, "sum")


def mean_over_axis(t: Tensor, axes, keepdims: bool = False) -> Tensor:
    axes = tuple(np.atleast_1d(axes))
    count = 1
    for ax in axes:
        count *= t.shape[ax]
    inv = 1.0 / count

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * np.asarray(inv, dtype=g.dtype), t.shape).copy(),)

    return make_result(t.data.mean(axis=axes, keepdims=keepdims), (t,), bwd, "mean")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def leaky_relu(t: Tensor, slope: float = 0.01) -> Tensor:
    mask = t.data >= 0
    out = np.where(mask, t.data, t.data * np.asarray(slope, dtype=t.data.dtype))

    def bwd(g):
        return (np.where(mask, g, g * np.asarray(slope, dtype=g.dtype)),)

    return make_result(out, (t,), bwd, "leaky_relu")


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    # Split by sign so exp never overflows.
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (t,), bwd, "sigmoid")


def softmax_channel(t: Tensor) -> Tensor:
    """Softmax across axis 1 (the channel/class axis)."""
    shifted = t.data - t.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return make_result(out, (t,), bwd, "softmax_channel")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_shape_checks(x, w, bias, stride, padding, groups):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D tensors, got input {x.shape}, weight {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"conv2d kernels must be square, got {kh}x{kw}")
    if cin % groups != 0 or cout % groups != 0:
        raise ValueError(f"groups={groups} must divide both Cin={cin} and Cout={cout}")
    if cin_g != cin // groups:
        raise ValueError(
            f"weight channel dim {cin_g} does not match Cin/groups = {cin}//{groups}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match Cout={cout}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty for input {x.shape}, kernel {kh}")
    return n, cin, h, wd, cout, kh, ho, wo


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with optional bias, stride, padding and groups.

    Shapes: input (N, Cin, H, W), weight (Cout, Cin/groups, k, k), output
    (N, Cout, H', W') with H' = floor((H + 2p - k)/stride) + 1.
    """
    n, cin, h, wd, cout, k, ho, wo = _conv_shape_checks(
        x.data, weight.data, None if bias is None else bias.data, stride, padding, groups
    )
    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if padding
        else x.data
    )
    depthwise = groups == cin and cout == cin

    acc = None
    if depthwise:
        out = np.zeros((n, cout, ho, wo), dtype=x.data.dtype)
        wvec = weight.data[:, 0]  # (C, k, k)
        for ki in range(k):
            for kj in range(k):
                xs = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
                out += wvec[None, :, ki, kj, None, None] * xs
    elif groups == 1:
        # Accumulate in (Cout, N, H', W') order, one GEMM per offset.
        acc = np.zeros((cout, n, ho, wo), dtype=x.data.dtype)
        for ki in range(k):
            for kj in range(k):
                xs = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
                acc += np.tensordot(weight.data[:, :, ki, kj], xs, axes=([1], [1]))
        out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    else:
        wg = weight.data.reshape(groups, cout // groups, cin // groups, k, k)
        acc = np.zeros((n, groups, cout // groups, ho * wo), dtype=x.data.dtype)
        for ki in range(k):
            for kj in range(k):
                xs = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
                xg = np.ascontiguousarray(xs).reshape(n, groups, cin // groups, ho * wo)
                acc += np.matmul(wg[None, :, :, :, ki, kj], xg)
        out = acc.reshape(n, cout, ho, wo)

    if bias is not None:
        out += bias.data[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(weight.data)
        if depthwise:
            for ki in range(k):
                for kj in range(k):
                    xs = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
                    dw[:, 0, ki, kj] = np.einsum("nchw,nchw->c", g, xs)
                    dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                        weight.data[None, :, 0, ki, kj, None, None] * g
                    )
        elif groups == 1:
            for ki in range(k):
                for kj in range(k):
                    xs = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
                    dw[:, :, ki, kj] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                    contrib = np.tensordot(weight.data[:, :, ki, kj], g, axes=([0], [1]))
                    dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                        contrib.transpose(1, 0, 2, 3)
                    )
        else:
            wg = weight.data.reshape(groups, cout // groups, cin // groups, k, k)
            gg = g.reshape(n, groups, cout // groups, ho * wo)
            dwg = dw.reshape(groups, cout // groups, cin // groups, k, k)
            for ki in range(k):
                for kj in range(k):
                    xs = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
                    xg = np.ascontiguousarray(xs).reshape(n, groups, cin // groups, ho * wo)
                    dwg[:, :, :, ki, kj] = np.einsum("ngoh,ngch->goc", gg, xg)
                    contrib = np.matmul(
                        wg[None, :, :, :, ki, kj].swapaxes(2, 3), gg
                    ).reshape(n, cin, ho, wo)
                    dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += contrib
        dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        dx = np.ascontiguousarray(dx)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return make_result(out, inputs, bwd, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, padding: int = 0) -> Tensor:
    """conv2d with groups equal to the channel count (weight (C, 1, k, k))."""
    return conv2d(x, weight, stride=1, padding=padding, groups=x.shape[1])


def transposed_conv2x2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel: doubles H and W.

    Weight shape is (Cin, Cout, 2, 2). With k == stride the output blocks
    are disjoint, so the whole op is a single tensor contraction.
    """
    n, cin, h, w = x.shape
    if weight.ndim != 4 or weight.shape[0] != cin or weight.shape[2:] != (2, 2):
        raise ValueError(
            f"transposed_conv2x2 weight must be ({cin}, Cout, 2, 2), got {weight.shape}"
        )
    cout = weight.shape[1]
    blocks = np.tensordot(x.data, weight.data, axes=([1], [0]))  # (N,H,W,Cout,2,2)
    out = np.ascontiguousarray(blocks.transpose(0, 3, 1, 4, 2, 5)).reshape(
        n, cout, 2 * h, 2 * w
    )
    if bias is not None:
        out += bias.data[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gb = g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)  # (N,H,W,Cout,2,2)
        dx = np.tensordot(gb, weight.data, axes=([3, 4, 5], [1, 2, 3]))  # (N,H,W,Cin)
        dx = np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
        dw = np.tensordot(x.data, gb, axes=([0, 2, 3], [0, 1, 2]))  # (Cin,Cout,2,2)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return make_result(out, inputs, bwd, "transposed_conv2x2")


# ---------------------------------------------------------------------------
# pooling and normalization
# ---------------------------------------------------------------------------


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Gradient goes to the first maximum in
    row-major window order (ties broken toward the top-left)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 requires even spatial extents, got {h}x{w}")
    windows = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dwin = np.zeros_like(windows)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = (
            dwin.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(dx),)

    return make_result(np.ascontiguousarray(out), (x,), bwd, "maxpool2x2")


def avgpool_global(x: Tensor) -> Tensor:
    """Mean over the spatial dims: (N, C, H, W) -> (N, C, 1, 1)."""
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)

    def bwd(g):
        return (np.broadcast_to(g * np.asarray(inv, dtype=g.dtype), x.shape).copy(),)

    return make_result(x.data.mean(axis=(2, 3), keepdims=True), (x,), bwd, "avgpool_global")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize across the channel axis at each spatial position, then apply
    the per-channel affine (gamma, beta)."""
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layernorm affine params must have shape ({c},)")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = centered * inv
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), bwd, "layernorm")


# ---------------------------------------------------------------------------
# patch folding
# ---------------------------------------------------------------------------


def patch_partition(x: Tensor, p: int) -> Tensor:
    """Fold each p x p spatial block into channels:
    (N, C, H, W) -> (N, p^2*C, H/p, W/p).

    Output channel index is (a*p + b)*C + c for patch offset (a, b) scanned
    row-major, with the original channel varying fastest.
    """
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"patch size {p} must divide spatial extents {h}x{w}")
    out = (
        x.data.reshape(n, c, h // p, p, w // p, p)
        .transpose(0, 3, 5, 1, 2, 4)
        .reshape(n, p * p * c, h // p, w // p)
    )

    def bwd(g):
        dx = (
            g.reshape(n, p, p, c, h // p, w // p)
            .transpose(0, 3, 4, 1, 5, 2)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(dx),)

    return make_result(np.ascontiguousarray(out), (x,), bwd, "patch_partition")
