import numpy as np
import pytest

from ghostv2 import BottleneckConfig, DfcConfig, GhostBottleneck, GhostModule, Tensor, count_macs, ghost_module, ghost_module_attn, ghostv2_bottleneck
from ghostv2.analysis import count_flops
from ghostv2.attention import DfcBranch
from ghostv2.blocks import PLACEMENTS, make_divisible
from ghostv2.errors import ConfigError, ShapeError


def zero_weights(layer):
    for _, p in layer.named_parameters():
        p.data[...] = 0.0


def test_make_divisible():
    assert [make_divisible(v) for v in (8, 10, 12, 13.5, 2, 0.5 * 24, 1.3 * 40)] == [8, 12, 12, 16, 4, 12, 52]


def test_ghost_module_shapes(rng):
    mod = GhostModule(4, 16, rng=rng)
    y = ghost_module(Tensor(rng.standard_normal((2, 5, 6, 4))), mod)
    assert y.shape == (2, 5, 6, 16)
    assert mod.intrinsic_channels == 8


def test_ghost_module_identity_composition(rng):
    mod = GhostModule(4, 8, relu=False, norm=False, rng=rng)
    mod.primary.conv.weight.data[...] = np.eye(4)[None, None]
    cheap = np.zeros((3, 3, 1, 4))
    cheap[1, 1] = 1.0
    mod.cheap.conv.weight.data[...] = cheap
    x = Tensor(rng.standard_normal((1, 3, 5, 4)))
    y = ghost_module(x, mod).data
    assert np.array_equal(y, np.concatenate([x.data, x.data], axis=-1))


def test_ghost_module_param_count(rng):
    c_in, intrinsic = 6, 8
    mod = GhostModule(c_in, 2 * intrinsic, rng=rng)
    assert mod.num_params() == c_in * intrinsic + 9 * intrinsic + 2 * (2 * intrinsic)
    bare = GhostModule(c_in, 2 * intrinsic, norm=False, rng=rng)
    assert bare.num_params() == c_in * intrinsic + 9 * intrinsic


def test_constant_gate_halves_output(rng):
    mod = GhostModule(4, 8, dfc=DfcConfig(kernel_h=3, kernel_w=3), rng=rng)
    zero_weights(mod.dfc)
    x = Tensor(rng.standard_normal((1, 4, 4, 4)))
    assert np.array_equal(mod(x).data, 0.5 * ghost_module(x, mod).data)


def test_transparent_gate(rng):
    dfc = DfcBranch(4, 8, DfcConfig(kernel_h=3, kernel_w=3, scaling="clip"), rng=rng)
    zero_weights(dfc)
    dfc.horizontal.bn.beta.data[...] = 5.0
    mod = GhostModule(4, 8, rng=rng)
    x = Tensor(rng.standard_normal((1, 4, 4, 4)))
    assert np.array_equal(ghost_module_attn(x, mod, dfc).data, ghost_module(x, mod).data)


def test_gated_equals_product_of_branches(rng):
    mod = GhostModule(4, 4, dfc=DfcConfig(kernel_h=3, kernel_w=3), rng=rng)
    x = Tensor(rng.standard_normal((1, 4, 4, 4)))
    gate = mod.dfc(x).data
    feats = mod.ghost_features(x).data
    assert np.array_equal(mod(x).data, gate * feats)


def test_gate_extent_mismatch_is_internal_error(rng):
    mod = GhostModule(4, 8, rng=rng)
    dfc = DfcBranch(4, 6, DfcConfig(kernel_h=3, kernel_w=3), rng=rng)
    with pytest.raises(AssertionError):
        ghost_module_attn(Tensor(np.ones((1, 4, 4, 4))), mod, dfc)


# --- bottleneck -----------------------------------------------------------


def test_config_invariants():
    with pytest.raises(ConfigError):
        BottleneckConfig(8, 16, 8, stride=3).validate()
    with pytest.raises(ConfigError):
        BottleneckConfig(16, 8, 8).validate()
    with pytest.raises(ConfigError):
        BottleneckConfig(8, 16, 8, attention_placement="everywhere").validate()
    assert BottleneckConfig(8, 16, 8).identity_shortcut
    assert not BottleneckConfig(8, 16, 8, stride=2).identity_shortcut
    assert not BottleneckConfig(8, 16, 12).identity_shortcut


@pytest.mark.parametrize("placement", PLACEMENTS)
@pytest.mark.parametrize("stride", [1, 2])
def test_all_placements_run(rng, placement, stride):
    cfg = BottleneckConfig(16, 32, 16 if stride == 1 else 24, stride, placement, DfcConfig(kernel_h=5, kernel_w=5))
    block = GhostBottleneck(cfg, rng=rng)
    y = ghostv2_bottleneck(Tensor(rng.standard_normal((1, 8, 8, 16))), block)
    assert y.shape == (1, 8 // stride, 8 // stride, cfg.c_out)
    assert np.all(np.isfinite(y.data))
    assert (block.ghost1.dfc is not None) == (placement in ("expanded", "both"))
    assert (block.ghost2.dfc is not None) == (placement in ("output", "both"))


def test_bottleneck_channel_mismatch(rng):
    block = GhostBottleneck(BottleneckConfig(8, 16, 8), rng=rng)
    with pytest.raises(ShapeError):
        ghostv2_bottleneck(Tensor(np.ones((1, 4, 4, 6))), block)


@pytest.mark.parametrize("placement", PLACEMENTS)
def test_dead_residual_branch_is_identity(rng, placement):
    block = GhostBottleneck(BottleneckConfig(8, 16, 8, 1, placement, DfcConfig(kernel_h=3, kernel_w=3)), rng=rng)
    zero_weights(block)
    x = Tensor(rng.standard_normal((2, 6, 6, 8)))
    assert np.array_equal(block(x).data, x.data)


def test_none_differs_from_expanded_only_by_gate(rng):
    cfg = BottleneckConfig(8, 16, 8, 1, "expanded", DfcConfig(kernel_h=3, kernel_w=3, scaling="clip"))
    gated = GhostBottleneck(cfg, rng=rng)
    plain = GhostBottleneck(BottleneckConfig(8, 16, 8, 1, "none"), rng=np.random.default_rng(99))
    shared = dict(gated.state_items())
    for name, arr in plain.state_items():
        arr[...] = shared[name]
    x = Tensor(rng.standard_normal((1, 6, 6, 8)))
    assert not np.allclose(gated(x).data, plain(x).data)
    zero_weights(gated.ghost1.dfc)
    gated.ghost1.dfc.horizontal.bn.beta.data[...] = 5.0  # clip -> gate of exactly 1
    assert np.array_equal(gated(x).data, plain(x).data)


@pytest.mark.parametrize("stride", [1, 2])
def test_attention_accounting_identity(rng, stride):
    dfc = DfcConfig(kernel_h=5, kernel_w=5)
    shape = (1, 16, 16, 16)
    macs = {}
    for placement in ("none", "expanded"):
        block = GhostBottleneck(BottleneckConfig(16, 48, 24, stride, placement, dfc), rng=np.random.default_rng(0))
        with count_macs() as cnt:
            block(Tensor(np.zeros(shape)))
        macs[placement] = cnt
        assert count_flops(block, shape).total_macs == cnt.macs
    branch = DfcBranch(16, 48, dfc, rng=rng)
    with count_macs() as alone:
        branch(Tensor(np.zeros(shape)))
    assert macs["expanded"].macs - macs["none"].macs == alone.macs
    assert macs["expanded"].scope_total("dfc") == alone.macs


def test_summary_matches_counter(rng):
    block = GhostBottleneck(BottleneckConfig(8, 24, 16, 2, "both", DfcConfig(kernel_h=3, kernel_w=3), dw_kernel=5, se=True), rng=rng)
    shape = (2, 10, 12, 8)
    out, rows = block.summarize(shape)
    with count_macs() as cnt:
        y = block(Tensor(np.zeros(shape)))
    assert out == y.shape
    assert sum(r.macs for r in rows) == cnt.macs
    assert sum(r.params for r in rows) == block.num_params()
