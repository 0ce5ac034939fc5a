"""Full segmentation network: conv stem, four wavelet-convolution encoder
stages, attention-gated skip connections, and a UNet-style decoder.

The model is built for one fixed input resolution because the per-level
fusion weight matrices (alpha/beta) live at each stage's spatial extent.
The resolution is therefore part of the constructor signature and travels
with checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import nn, ops
from .tensor import Tensor
from .wtconv import WTConvLayer

_ALLOWED_KERNELS = (3, 5)


@dataclass
class PRNetConfig:
    """Architecture switches. Defaults give the full model; the ablation
    axes are ``use_cfa``, ``use_gfwm``, ``kernel_set`` and ``use_mwcn``
    (false swaps every encoder stage for one plain double-conv block)."""

    in_channels: int = 3
    num_classes: int = 10
    stem_channels: int = 64
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: tuple[int, ...] = (1, 1, 2, 1)
    kernel_set: tuple[int, ...] = (3, 5)
    use_cfa: bool = True
    use_gfwm: bool = True
    use_mwcn: bool = True
    wtconv_levels: int = 2
    cfa_patch: int = 2
    leaky_slope: float = 0.01
    layernorm_eps: float = 1e-5

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.kernel_set = tuple(sorted(int(k) for k in self.kernel_set))
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("stage_channels and blocks_per_stage must both have length 4")
        if any(c < 1 for c in self.stage_channels) or any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("stage widths and block counts must be positive")
        if not self.kernel_set or any(k not in _ALLOWED_KERNELS for k in self.kernel_set):
            raise ValueError(f"kernel_set must be a nonempty subset of {_ALLOWED_KERNELS}")
        if len(set(self.kernel_set)) != len(self.kernel_set):
            raise ValueError("kernel_set entries must be distinct")
        if not 0 <= self.wtconv_levels <= 3:
            raise ValueError(f"wtconv_levels must be in [0, 3], got {self.wtconv_levels}")
        if self.cfa_patch < 1:
            raise ValueError(f"cfa_patch must be >= 1, got {self.cfa_patch}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1 or self.stem_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.layernorm_eps <= 0:
            raise ValueError("layernorm_eps must be positive")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PRNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, **kw) -> "PRNetConfig":
        return replace(self, **kw)


class ConvStem(nn.Module):
    """3x3 conv + channel LayerNorm + LeakyReLU, full resolution."""

    def __init__(self, rng: np.random.Generator, cfg: PRNetConfig):
        super().__init__()
        self.slope = cfg.leaky_slope
        self.conv = nn.Conv2d(rng, cfg.in_channels, cfg.stem_channels, 3, padding=1)
        self.norm = nn.LayerNorm2d(cfg.stem_channels, eps=cfg.layernorm_eps)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.leaky_relu(self.norm(self.conv(x)), self.slope)


class MWCNBlock(nn.Module):
    """One encoder block: LayerNorm, then per kernel size a weighted blend of
    a plain conv (local) and a wavelet conv (global), then a two-layer
    pointwise feed-forward, with a residual connection around the whole block.

    The blend weights are either learnable per-pixel matrices of shape
    (1, 1, H, W) (one alpha/beta pair per kernel level, broadcast over batch
    and channels) or the fixed constants 0.5/0.5.
    """

    def __init__(self, rng: np.random.Generator, cfg: PRNetConfig, channels: int, hw: tuple[int, int]):
        super().__init__()
        self.slope = cfg.leaky_slope
        self.use_gfwm = cfg.use_gfwm
        self.wt_levels = cfg.wtconv_levels
        self.hw = hw
        self.norm = nn.LayerNorm2d(channels, eps=cfg.layernorm_eps)
        levels = []
        for i, k in enumerate(cfg.kernel_set, start=1):
            conv = nn.Conv2d(rng, channels, channels, k, padding=(k - 1) // 2)
            wt = WTConvLayer(rng, channels, k, levels=cfg.wtconv_levels)
            setattr(self, f"conv{i}", conv)
            setattr(self, f"wt{i}", wt)
            if cfg.use_gfwm:
                alpha = nn.full((1, 1, *hw), 0.5)
                beta = nn.full((1, 1, *hw), 0.5)
                setattr(self, f"alpha{i}", alpha)
                setattr(self, f"beta{i}", beta)
            else:
                alpha = beta = None
            levels.append((conv, wt, alpha, beta))
        self.levels = levels
        self.pw1 = nn.Conv2d(rng, channels, channels, 1)
        self.pw2 = nn.Conv2d(rng, channels, channels, 1)

    def _wavelet_branch(self, wt: WTConvLayer, t: Tensor) -> Tensor:
        h, w = t.shape[2:]
        step = 1 << self.wt_levels
        ph, pw = (-h) % step, (-w) % step
        if ph or pw:
            return ops.crop2d(wt(ops.pad2d(t, ph, pw)), h, w)
        return wt(t)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2:] != self.hw:
            raise ValueError(
                f"input extent {x.shape[2:]} does not match this block's "
                f"fusion-weight extent {self.hw}"
            )
        cur = self.norm(x)
        for conv, wt, alpha, beta in self.levels:
            local = conv(cur)
            wide = self._wavelet_branch(wt, cur)
            if self.use_gfwm:
                cur = ops.add(ops.mul(alpha, local), ops.mul(beta, wide))
            else:
                cur = ops.add(ops.mul(local, 0.5), ops.mul(wide, 0.5))
        f = self.pw2(ops.leaky_relu(self.pw1(cur), self.slope))
        return ops.add(f, x)


class MWCNStage(nn.Module):
    """Pointwise channel projection followed by a run of MWCN blocks."""

    def __init__(
        self,
        rng: np.random.Generator,
        cfg: PRNetConfig,
        in_ch: int,
        out_ch: int,
        n_blocks: int,
        hw: tuple[int, int],
    ):
        super().__init__()
        self.proj = nn.Conv2d(rng, in_ch, out_ch, 1)
        self.blocks = nn.ModuleList(
            MWCNBlock(rng, cfg, out_ch, hw) for _ in range(n_blocks)
        )

    def __call__(self, x: Tensor) -> Tensor:
        x = self.proj(x)
        for block in self.blocks:
            x = block(x)
        return x


class PlainStage(nn.Module):
    """Classic double 3x3 conv stage used when the wavelet blocks are
    ablated away; block count is fixed at one double conv per stage."""

    def __init__(self, rng: np.random.Generator, cfg: PRNetConfig, in_ch: int, out_ch: int):
        super().__init__()
        self.slope = cfg.leaky_slope
        self.conv1 = nn.Conv2d(rng, in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(rng, out_ch, out_ch, 3, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        x = ops.leaky_relu(self.conv1(x), self.slope)
        return ops.leaky_relu(self.conv2(x), self.slope)


class CFABlock(nn.Module):
    """Channel attention over a skip feature map.

    Pools the map itself plus two patch-folded variants (patch sizes s and
    2s), reduces the folded vectors back to C entries by summing randomly
    grouped channels (the grouping permutation is drawn once at construction
    and then frozen), interleaves the three scales and averages them, and
    maps the result through a pointwise conv + sigmoid into per-channel
    attention coefficients in (0, 1).
    """

    def __init__(self, rng: np.random.Generator, channels: int, patch: int):
        super().__init__()
        self.channels = channels
        self.patch = patch
        s2 = patch * patch
        self.perm_small = rng.permutation(s2 * channels)
        self.perm_large = rng.permutation(4 * s2 * channels)
        self.pw = nn.Conv2d(rng, channels, channels, 1)

    def attention(self, f: Tensor) -> Tensor:
        n, c, h, w = f.shape
        s = self.patch
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        if h % (2 * s) or w % (2 * s):
            raise ValueError(
                f"feature extents {h}x{w} must be divisible by 2*patch = {2 * s}"
            )
        s2 = s * s
        v0 = ops.reshape(ops.avgpool_global(f), (n, c))
        folded_s = ops.reshape(ops.avgpool_global(ops.patch_partition(f, s)), (n, s2 * c))
        folded_2s = ops.reshape(
            ops.avgpool_global(ops.patch_partition(f, 2 * s)), (n, 4 * s2 * c)
        )
        v1 = ops.sum_over(
            ops.reshape(ops.permute_channels(folded_s, self.perm_small), (n, c, s2)), axes=2
        )
        v2 = ops.sum_over(
            ops.reshape(ops.permute_channels(folded_2s, self.perm_large), (n, c, 4 * s2)),
            axes=2,
        )
        stacked = ops.concat_channels(
            [ops.reshape(v, (n, 1, c)) for v in (v0, v1, v2)], axis=1
        )
        interleaved = ops.transpose_axes(stacked, (0, 2, 1))
        pooled = ops.mean_over_axis(interleaved, 2)
        return ops.sigmoid(self.pw(ops.reshape(pooled, (n, c, 1, 1))))

    def __call__(self, f: Tensor) -> Tensor:
        return ops.mul(f, self.attention(f))


class UpBlock(nn.Module):
    """Transposed-conv upsample, concat with the skip, two 3x3 convs."""

    def __init__(self, rng: np.random.Generator, cfg: PRNetConfig, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.slope = cfg.leaky_slope
        self.up = nn.TransposedConv2x2(rng, in_ch, out_ch)
        self.conv1 = nn.Conv2d(rng, out_ch + skip_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(rng, out_ch, out_ch, 3, padding=1)

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        x = ops.concat_channels([self.up(x), skip])
        x = ops.leaky_relu(self.conv1(x), self.slope)
        return ops.leaky_relu(self.conv2(x), self.slope)


class FusionBlock(nn.Module):
    """Full-resolution merge with the stem skip: concat + two 3x3 convs."""

    def __init__(self, rng: np.random.Generator, cfg: PRNetConfig, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.slope = cfg.leaky_slope
        self.conv1 = nn.Conv2d(rng, in_ch + skip_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(rng, out_ch, out_ch, 3, padding=1)

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        x = ops.concat_channels([x, skip])
        x = ops.leaky_relu(self.conv1(x), self.slope)
        return ops.leaky_relu(self.conv2(x), self.slope)


def validate_input_hw(cfg: PRNetConfig, hw: tuple[int, int]) -> None:
    h, w = hw
    if h < 8 or w < 8:
        raise ValueError(f"input extents must be at least 8x8, got {h}x{w}")
    for name, v in (("height", h), ("width", w)):
        if v % 8:
            raise ValueError(
                f"input {name} {v} violates the encoder downsampling constraint "
                "(must be divisible by 8)"
            )
        if cfg.use_cfa and v % (8 * cfg.cfa_patch):
            raise ValueError(
                f"input {name} {v} violates the skip-attention pooling constraint "
                f"(must be divisible by {8 * cfg.cfa_patch} with patch size {cfg.cfa_patch})"
            )


class PRNet(nn.Module):
    """Encoder-decoder segmentation model producing per-class logits at the
    input resolution. ``seed`` drives parameter init and the frozen channel
    permutations; identical (config, input_hw, seed) triples construct
    bitwise-identical models."""

    def __init__(
        self,
        config: PRNetConfig,
        input_hw: tuple[int, int] = (256, 256),
        seed: int | np.random.SeedSequence = 0,
    ):
        super().__init__()
        validate_input_hw(config, tuple(input_hw))
        self.config = config
        self.input_hw = (int(input_hw[0]), int(input_hw[1]))
        rng = np.random.default_rng(seed)
        h, w = self.input_hw
        cs = config.stage_channels

        self.stem = ConvStem(rng, config)
        stages = []
        in_ch = config.stem_channels
        for i in range(4):
            hw_i = (h >> i, w >> i)
            if config.use_mwcn:
                stage = MWCNStage(rng, config, in_ch, cs[i], config.blocks_per_stage[i], hw_i)
            else:
                stage = PlainStage(rng, config, in_ch, cs[i])
            stages.append(stage)
            in_ch = cs[i]
        self.stages = nn.ModuleList(stages)

        skip_chs = [config.stem_channels, cs[0], cs[1], cs[2]]
        if config.use_cfa:
            self.cfa = nn.ModuleList(
                CFABlock(rng, ch, config.cfa_patch) for ch in skip_chs
            )
        else:
            self.cfa = None

        dec = (cs[2], cs[1], cs[0], cs[0])
        self.up1 = UpBlock(rng, config, cs[3], cs[2], dec[0])
        self.up2 = UpBlock(rng, config, dec[0], cs[1], dec[1])
        self.up3 = UpBlock(rng, config, dec[1], cs[0], dec[2])
        self.fusion = FusionBlock(rng, config, dec[2], config.stem_channels, dec[3])
        self.head = nn.Conv2d(rng, dec[3], config.num_classes, 1)

    def encode(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Returns (X_0, [F_1..F_4]); F_i is stage i's output before pooling."""
        n, c, h, w = x.shape
        if c != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {c}")
        if (h, w) != self.input_hw:
            raise ValueError(
                f"model was built for {self.input_hw[0]}x{self.input_hw[1]} inputs, got {h}x{w}"
            )
        x0 = self.stem(x)
        feats = []
        cur = x0
        for i, stage in enumerate(self.stages):
            cur = stage(cur)
            feats.append(cur)
            if i < 3:
                cur = ops.maxpool2x2(cur)
        return x0, feats

    def decode(self, x0: Tensor, feats: list[Tensor]) -> Tensor:
        f1, f2, f3, f4 = feats
        skips = [x0, f1, f2, f3]
        if self.cfa is not None:
            skips = [blk(s) for blk, s in zip(self.cfa, skips)]
        d = self.up1(f4, skips[3])
        d = self.up2(d, skips[2])
        d = self.up3(d, skips[1])
        d = self.fusion(d, skips[0])
        return self.head(d)

    def __call__(self, x: Tensor) -> Tensor:
        x0, feats = self.encode(x)
        return self.decode(x0, feats)

    def cfa_permutations(self) -> dict[str, list[int]]:
        """Frozen channel groupings, for checkpoint serialization."""
        out: dict[str, list[int]] = {}
        if self.cfa is not None:
            for i, blk in enumerate(self.cfa):
                out[f"cfa/{i}/small"] = blk.perm_small.tolist()
                out[f"cfa/{i}/large"] = blk.perm_large.tolist()
        return out

    def set_cfa_permutations(self, perms: dict[str, list[int]]) -> None:
        if self.cfa is None:
            if perms:
                raise ValueError("checkpoint carries attention permutations but the model has none")
            return
        for i, blk in enumerate(self.cfa):
            blk.perm_small = np.asarray(perms[f"cfa/{i}/small"], dtype=np.int64)
            blk.perm_large = np.asarray(perms[f"cfa/{i}/large"], dtype=np.int64)
