"""Model assembly: config validation, stage shape law, attention behavior,
ablation wiring, gating semantics, and parameter counts."""

import numpy as np
import pytest

import oracles
from prnet import ops
from prnet.model import (
    CFABlock,
    MWCNBlock,
    PRNet,
    PRNetConfig,
    PlainStage,
    validate_input_hw,
)
from prnet.tensor import Tensor, no_grad


def t(arr):
    return Tensor(np.asarray(arr, dtype=np.float32))


def small_cfg(**kw):
    return PRNetConfig(stem_channels=8, stage_channels=(8, 16, 32, 64), **kw)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_config_defaults():
    cfg = PRNetConfig()
    assert cfg.stage_channels == (64, 128, 256, 512)
    assert cfg.blocks_per_stage == (1, 1, 2, 1)
    assert cfg.kernel_set == (3, 5)
    assert cfg.use_cfa and cfg.use_gfwm and cfg.use_mwcn
    assert cfg.wtconv_levels == 2 and cfg.cfa_patch == 2


@pytest.mark.parametrize(
    "kw,msg",
    [
        ({"stage_channels": (64, 128, 256)}, "length 4"),
        ({"blocks_per_stage": (1, 1, 1, 1, 1)}, "length 4"),
        ({"stage_channels": (64, 0, 256, 512)}, "positive"),
        ({"kernel_set": (7,)}, "kernel_set"),
        ({"kernel_set": ()}, "kernel_set"),
        ({"kernel_set": (3, 3)}, "distinct"),
        ({"wtconv_levels": 4}, "wtconv_levels"),
        ({"wtconv_levels": -1}, "wtconv_levels"),
        ({"cfa_patch": 0}, "cfa_patch"),
        ({"num_classes": 1}, "num_classes"),
        ({"layernorm_eps": 0.0}, "layernorm_eps"),
    ],
)
def test_config_validation(kw, msg):
    with pytest.raises(ValueError, match=msg):
        PRNetConfig(**kw)


def test_config_kernel_set_is_sorted():
    assert PRNetConfig(kernel_set=(5, 3)).kernel_set == (3, 5)


def test_config_dict_roundtrip():
    cfg = PRNetConfig(num_classes=7, use_cfa=False, kernel_set=(5,))
    again = PRNetConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ValueError, match="unknown"):
        PRNetConfig.from_dict({"bogus": 1})


def test_config_with_overrides():
    cfg = PRNetConfig().with_overrides(use_gfwm=False)
    assert not cfg.use_gfwm
    assert cfg.use_cfa


# ---------------------------------------------------------------------------
# input extent validation
# ---------------------------------------------------------------------------


def test_validate_input_hw_messages():
    cfg = PRNetConfig()
    with pytest.raises(ValueError, match="at least 8x8"):
        validate_input_hw(cfg, (4, 64))
    with pytest.raises(ValueError, match="divisible by 8"):
        validate_input_hw(cfg, (60, 64))
    # 72 is divisible by 8 but not by 16 = 8 * cfa_patch.
    with pytest.raises(ValueError, match="skip-attention pooling"):
        validate_input_hw(cfg, (72, 64))
    validate_input_hw(cfg, (64, 32))
    # Without CFA only the factor-8 constraint remains.
    validate_input_hw(PRNetConfig(use_cfa=False), (72, 72))


def test_model_rejects_wrong_runtime_shapes():
    model = PRNet(small_cfg(), input_hw=(32, 32), seed=0)
    with pytest.raises(ValueError, match="input channels"):
        model(t(np.zeros((1, 1, 32, 32))))
    with pytest.raises(ValueError, match="built for 32x32"):
        model(t(np.zeros((1, 3, 64, 64))))


# ---------------------------------------------------------------------------
# shape law
# ---------------------------------------------------------------------------


def test_encoder_stage_shapes_default_widths():
    model = PRNet(PRNetConfig(), input_hw=(64, 64), seed=0)
    with no_grad():
        x0, feats = model.encode(t(np.random.default_rng(0).normal(size=(1, 3, 64, 64))))
    assert x0.shape == (1, 64, 64, 64)
    assert feats[0].shape == (1, 64, 64, 64)  # F_1 extent equals X_0's
    assert feats[1].shape == (1, 128, 32, 32)
    assert feats[2].shape == (1, 256, 16, 16)
    assert feats[3].shape == (1, 512, 8, 8)


def test_model_forward_shape_desk_scale():
    model = PRNet(small_cfg(), input_hw=(64, 64), seed=0)
    with no_grad():
        out = model(t(np.random.default_rng(1).normal(size=(2, 3, 64, 64))))
    assert out.shape == (2, 10, 64, 64)


def test_forward_is_deterministic_per_seed():
    x = np.random.default_rng(2).normal(size=(1, 3, 32, 32)).astype(np.float32)
    with no_grad():
        a = PRNet(small_cfg(), (32, 32), seed=5)(t(x)).data
        b = PRNet(small_cfg(), (32, 32), seed=5)(t(x)).data
        c = PRNet(small_cfg(), (32, 32), seed=6)(t(x)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_batch_order_equivariance():
    model = PRNet(small_cfg(), (32, 32), seed=3)
    rng = np.random.default_rng(4)
    pair = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
    with no_grad():
        fwd = model(t(pair)).data
        swapped = model(t(pair[::-1].copy())).data
    np.testing.assert_allclose(fwd, swapped[::-1], rtol=1e-5, atol=1e-6)


def test_zeroed_parameters_give_zero_logits():
    model = PRNet(small_cfg(), (32, 32), seed=7)
    for _, p in model.named_parameters():
        p.data = np.zeros_like(p.data)
    with no_grad():
        out = model(t(np.random.default_rng(8).normal(size=(1, 3, 32, 32))))
    np.testing.assert_array_equal(out.data, np.zeros_like(out.data))


# ---------------------------------------------------------------------------
# CFA attention
# ---------------------------------------------------------------------------


def test_cfa_attention_shape_and_open_interval():
    blk = CFABlock(np.random.default_rng(9), channels=6, patch=2)
    f = t(np.random.default_rng(10).normal(size=(2, 6, 8, 8)))
    a = blk.attention(f)
    assert a.shape == (2, 6, 1, 1)
    assert np.all(a.data > 0.0) and np.all(a.data < 1.0)
    out = blk(f)
    np.testing.assert_allclose(out.data, f.data * a.data, rtol=1e-6)


def test_cfa_zero_conv_gives_half_attention():
    blk = CFABlock(np.random.default_rng(11), channels=4, patch=2)
    blk.pw.weight.data = np.zeros_like(blk.pw.weight.data)
    blk.pw.bias.data = np.zeros_like(blk.pw.bias.data)
    f = t(np.random.default_rng(12).normal(size=(1, 4, 8, 8)))
    np.testing.assert_allclose(blk.attention(f).data, 0.5, rtol=1e-6)
    np.testing.assert_allclose(blk(f).data, 0.5 * f.data, rtol=1e-6)


def test_cfa_constant_input_gives_uniform_attention():
    # Constant maps pool to the same per-channel value at every scale; with
    # an identity pointwise conv the attention must be equal across channels,
    # at sigmoid(c * (1 + s^2 + 4 s^2) / 3).
    c_val, s, channels = 0.25, 2, 4
    blk = CFABlock(np.random.default_rng(13), channels=channels, patch=s)
    eye = np.zeros_like(blk.pw.weight.data)
    for i in range(channels):
        eye[i, i, 0, 0] = 1.0
    blk.pw.weight.data = eye
    blk.pw.bias.data = np.zeros_like(blk.pw.bias.data)
    f = t(np.full((1, channels, 8, 8), c_val, dtype=np.float32))
    a = blk.attention(f).data.ravel()
    expected = 1.0 / (1.0 + np.exp(-c_val * (1 + s * s + 4 * s * s) / 3.0))
    np.testing.assert_allclose(a, expected, rtol=1e-5)


def test_cfa_divisibility_error():
    blk = CFABlock(np.random.default_rng(14), channels=2, patch=2)
    with pytest.raises(ValueError, match="divisible by 2\\*patch"):
        blk.attention(t(np.zeros((1, 2, 6, 8))))


def test_cfa_permutations_roundtrip_across_seeds():
    cfg = small_cfg()
    a = PRNet(cfg, (32, 32), seed=20)
    b = PRNet(cfg, (32, 32), seed=21)
    perms = a.cfa_permutations()
    assert set(perms) == {f"cfa/{i}/{kind}" for i in range(4) for kind in ("small", "large")}
    b.set_cfa_permutations(perms)
    for blk_a, blk_b in zip(a.cfa, b.cfa):
        np.testing.assert_array_equal(blk_a.perm_small, blk_b.perm_small)
        np.testing.assert_array_equal(blk_a.perm_large, blk_b.perm_large)


def test_set_cfa_permutations_rejected_without_cfa():
    model = PRNet(small_cfg(use_cfa=False), (32, 32), seed=0)
    assert model.cfa_permutations() == {}
    with pytest.raises(ValueError, match="permutations"):
        model.set_cfa_permutations({"cfa/0/small": [0]})
    model.set_cfa_permutations({})  # no-op is fine


# ---------------------------------------------------------------------------
# MWCN block semantics
# ---------------------------------------------------------------------------


def test_mwcn_extent_mismatch_error():
    blk = MWCNBlock(np.random.default_rng(15), small_cfg(), channels=8, hw=(16, 16))
    with pytest.raises(ValueError, match="fusion-weight extent"):
        blk(t(np.zeros((1, 8, 8, 8))))


def test_mwcn_beta_zero_gates_out_the_wavelet_branch():
    cfg = small_cfg()
    blk = MWCNBlock(np.random.default_rng(16), cfg, channels=8, hw=(8, 8))
    for i in (1, 2):
        getattr(blk, f"beta{i}").data = np.zeros_like(getattr(blk, f"beta{i}").data)
        getattr(blk, f"alpha{i}").data = np.ones_like(getattr(blk, f"alpha{i}").data)
    x = t(np.random.default_rng(17).normal(size=(1, 8, 8, 8)))
    with no_grad():
        base = blk(x).data.copy()
        # Output must ignore every wavelet parameter once beta is zero.
        for i in (1, 2):
            wt = getattr(blk, f"wt{i}")
            for _, p in wt.named_parameters():
                p.data = p.data + 7.0
        perturbed = blk(x).data
        # And it must equal the hand-composed plain-conv path.
        cur = blk.norm(x)
        cur = blk.conv1(cur)
        cur = blk.conv2(cur)
        manual = ops.add(blk.pw2(ops.leaky_relu(blk.pw1(cur), cfg.leaky_slope)), x).data
    np.testing.assert_array_equal(base, perturbed)
    np.testing.assert_allclose(base, manual, rtol=1e-5, atol=1e-6)


def test_mwcn_alpha_zero_gates_out_the_plain_branch():
    blk = MWCNBlock(np.random.default_rng(18), small_cfg(), channels=8, hw=(8, 8))
    for i in (1, 2):
        getattr(blk, f"alpha{i}").data = np.zeros_like(getattr(blk, f"alpha{i}").data)
    x = t(np.random.default_rng(19).normal(size=(1, 8, 8, 8)))
    with no_grad():
        base = blk(x).data.copy()
        for i in (1, 2):
            conv = getattr(blk, f"conv{i}")
            conv.weight.data = conv.weight.data + 3.0
            conv.bias.data = conv.bias.data + 3.0
        perturbed = blk(x).data
    np.testing.assert_array_equal(base, perturbed)


def test_mwcn_identity_branches_reduce_to_norm_plus_residual():
    # Dirac convs, wavelet layers gated to identity, identity pointwise chain:
    # the block must compute leaky(LayerNorm(x)) + x exactly by dataflow.
    cfg = small_cfg(wtconv_levels=1)
    blk = MWCNBlock(np.random.default_rng(22), cfg, channels=4, hw=(8, 8))
    for i, k in enumerate(cfg.kernel_set, start=1):
        conv = getattr(blk, f"conv{i}")
        w = np.zeros_like(conv.weight.data)
        for c in range(4):
            w[c, c, k // 2, k // 2] = 1.0
        conv.weight.data = w
        conv.bias.data = np.zeros_like(conv.bias.data)
        wt = getattr(blk, f"wt{i}")
        base = np.zeros_like(wt.base_weight.data)
        base[:, 0, k // 2, k // 2] = 1.0
        wt.base_weight.data = base
        wt.subband_weight1.data = np.zeros_like(wt.subband_weight1.data)
    for pw in (blk.pw1, blk.pw2):
        eye = np.zeros_like(pw.weight.data)
        for c in range(4):
            eye[c, c, 0, 0] = 1.0
        pw.weight.data = eye
        pw.bias.data = np.zeros_like(pw.bias.data)
    x = t(np.random.default_rng(23).normal(size=(1, 4, 8, 8)))
    with no_grad():
        got = blk(x).data
        want = ops.add(ops.leaky_relu(blk.norm(x), cfg.leaky_slope), x).data
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)


def test_gfwm_disabled_has_no_fusion_parameters():
    blk = MWCNBlock(np.random.default_rng(24), small_cfg(use_gfwm=False), channels=8, hw=(8, 8))
    names = {name for name, _ in blk.named_parameters()}
    assert names.isdisjoint({"alpha1", "beta1", "alpha2", "beta2"})
    blk_on = MWCNBlock(np.random.default_rng(24), small_cfg(), channels=8, hw=(8, 8))
    names_on = {name for name, _ in blk_on.named_parameters()}
    assert {"alpha1", "beta1", "alpha2", "beta2"} <= names_on


def test_single_kernel_block_has_one_level():
    blk = MWCNBlock(np.random.default_rng(25), small_cfg(kernel_set=(5,)), channels=8, hw=(8, 8))
    assert len(blk.levels) == 1
    assert not hasattr(blk, "conv2")


# ---------------------------------------------------------------------------
# ablation wiring and parameter counts
# ---------------------------------------------------------------------------


def test_plain_unet_fallback_uses_double_conv_stages():
    model = PRNet(small_cfg(use_mwcn=False, use_cfa=False, use_gfwm=False), (32, 32), seed=0)
    assert model.cfa is None
    for stage in model.stages:
        assert isinstance(stage, PlainStage)


@pytest.mark.parametrize(
    "kw",
    [
        {},
        {"use_cfa": False},
        {"use_gfwm": False},
        {"kernel_set": (3,)},
        {"kernel_set": (5,)},
        {"use_mwcn": False},
        {"use_mwcn": False, "use_cfa": False, "use_gfwm": False},
    ],
    ids=["full", "no_cfa", "no_gfwm", "k3", "k5", "plain", "vanilla_unet"],
)
def test_parameter_count_matches_oracle(kw):
    cfg = PRNetConfig(**kw)
    model = PRNet(cfg, input_hw=(32, 32), seed=0)
    assert model.num_parameters() == oracles.model_params(cfg, (32, 32))


def test_default_model_parameter_counts_are_pinned():
    # The per-pixel fusion matrices scale with resolution, so the total
    # depends on input_hw: desk scale (64x64) vs the full 256x256 pipeline.
    cfg = PRNetConfig()
    desk = PRNet(cfg, input_hw=(64, 64), seed=0)
    assert desk.num_parameters() == oracles.model_params(cfg, (64, 64)) == 18_707_594
    assert oracles.model_params(cfg, (256, 256)) == 19_049_354
