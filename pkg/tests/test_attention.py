import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghostv2 import (
    ConvKernel,
    DecoupledWeights,
    DfcBranch,
    DfcConfig,
    FullAttentionWeights,
    Tensor,
    count_macs,
    dfc_attention_conv,
    dfc_attention_general,
    dfc_branch,
    full_fc_attention,
    lift_conv_to_general,
)
from ghostv2.analysis import jacobian_row
from ghostv2.errors import ParameterError, ShapeError
import oracles


def dw(arr):
    return ConvKernel.depthwise(Tensor(np.asarray(arr, dtype=np.float64)))


def identity_full(h, w, c):
    f = np.zeros((h, w, h, w, c))
    for i in range(h):
        for j in range(w):
            f[i, j, i, j, :] = 1.0
    return f


def identity_decoupled(h, w, c):
    f_h = np.broadcast_to(np.eye(h)[:, :, None, None], (h, h, w, c)).copy()
    f_w = np.broadcast_to(np.eye(w)[:, :, None, None], (w, w, h, c)).copy()
    return f_h, f_w


# --- full FC attention ----------------------------------------------------


def test_full_identity(rng):
    z = Tensor(rng.standard_normal((2, 3, 4, 2)))
    y = full_fc_attention(z, FullAttentionWeights(Tensor(identity_full(3, 4, 2))))
    assert np.array_equal(y.data, z.data)


def test_full_uniform_is_channel_sum(rng):
    z = Tensor(rng.standard_normal((1, 3, 4, 2)))
    y = full_fc_attention(z, FullAttentionWeights(Tensor(np.ones((3, 4, 3, 4, 2)))))
    np.testing.assert_allclose(y.data, np.broadcast_to(z.data.sum(axis=(1, 2), keepdims=True), z.shape), atol=1e-13)


def test_full_matches_loops(rng):
    z = rng.standard_normal((1, 2, 2, 1))
    f = rng.standard_normal((2, 2, 2, 2, 1))
    y = full_fc_attention(Tensor(z), FullAttentionWeights(Tensor(f)))
    np.testing.assert_allclose(y.data, oracles.full_attention_loops(z, f), atol=1e-14)


def test_full_extent_mismatch(rng):
    with pytest.raises(ShapeError):
        full_fc_attention(Tensor(np.ones((1, 3, 3, 1))), FullAttentionWeights(Tensor(np.ones((2, 2, 2, 2, 1)))))


# --- decoupled attention --------------------------------------------------


def test_general_identity(rng):
    z = Tensor(rng.standard_normal((2, 3, 4, 2)))
    f_h, f_w = identity_decoupled(3, 4, 2)
    assert np.array_equal(dfc_attention_general(z, DecoupledWeights(Tensor(f_h), Tensor(f_w))).data, z.data)


def test_general_uniform_is_global_sum(rng):
    z = Tensor(rng.standard_normal((1, 3, 4, 2)))
    y = dfc_attention_general(z, DecoupledWeights(Tensor(np.ones((3, 3, 4, 2))), Tensor(np.ones((4, 4, 3, 2)))))
    np.testing.assert_allclose(y.data, np.broadcast_to(z.data.sum(axis=(1, 2), keepdims=True), z.shape), atol=1e-13)


def test_general_matches_two_stage_loops(rng):
    z = rng.standard_normal((1, 2, 3, 1))
    f_h = rng.standard_normal((2, 2, 3, 1))
    f_w = rng.standard_normal((3, 3, 2, 1))
    y = dfc_attention_general(Tensor(z), DecoupledWeights(Tensor(f_h), Tensor(f_w)))
    np.testing.assert_allclose(y.data, oracles.decoupled_loops(z, f_h, f_w), atol=1e-14)


def test_general_stage_order_matters(rng):
    z = Tensor(rng.standard_normal((1, 3, 3, 1)))
    f_h = rng.standard_normal((3, 3, 3, 1))
    f_w = rng.standard_normal((3, 3, 3, 1))
    a = dfc_attention_general(z, DecoupledWeights(Tensor(f_h), Tensor(f_w))).data
    # horizontal-then-vertical, computed by transposing the map
    zt = Tensor(z.data.transpose(0, 2, 1, 3).copy())
    b = dfc_attention_general(zt, DecoupledWeights(Tensor(f_w), Tensor(f_h))).data.transpose(0, 2, 1, 3)
    assert not np.allclose(a, b)


# --- convolutional DFC ----------------------------------------------------


def test_conv_delta_kernels(rng):
    z = Tensor(rng.standard_normal((1, 5, 6, 3)))
    kv = np.zeros((3, 1, 1, 3))
    kv[1] = 1
    kh = np.zeros((1, 5, 1, 3))
    kh[0, 2] = 1
    assert np.array_equal(dfc_attention_conv(z, dw(kv), dw(kh)).data, z.data)


def test_conv_full_extent_ones_is_global_sum(rng):
    h, w = 3, 4
    z = Tensor(rng.standard_normal((1, h, w, 2)))
    y = dfc_attention_conv(z, dw(np.ones((2 * h - 1, 1, 1, 2))), dw(np.ones((1, 2 * w - 1, 1, 2))))
    np.testing.assert_allclose(y.data, np.broadcast_to(z.data.sum(axis=(1, 2), keepdims=True), z.shape), atol=1e-13)


def test_conv_rejects_even_or_wrong_kernels():
    z = Tensor(np.ones((1, 4, 4, 1)))
    with pytest.raises(ParameterError):
        dfc_attention_conv(z, dw(np.ones((2, 1, 1, 1))), dw(np.ones((1, 3, 1, 1))))
    with pytest.raises(ParameterError):
        dfc_attention_conv(z, dw(np.ones((1, 3, 1, 1))), dw(np.ones((3, 1, 1, 1))))
    with pytest.raises(ParameterError):
        DfcConfig(kernel_h=4)


def test_lift_example():
    a, b, c = 2.0, 3.0, 5.0
    lifted = lift_conv_to_general(dw([[[[a]]], [[[b]]], [[[c]]]]), dw(np.ones((1, 1, 1, 1))), 2, 1)
    assert lifted.f_h.data[:, :, 0, 0].tolist() == [[b, c], [a, b]]


def test_lift_delta_is_identity():
    kv = np.zeros((5, 1, 1, 2))
    kv[2] = 1
    kh = np.zeros((1, 3, 1, 2))
    kh[0, 1] = 1
    lifted = lift_conv_to_general(dw(kv), dw(kh), 4, 3)
    f_h, f_w = identity_decoupled(4, 3, 2)
    assert np.array_equal(lifted.f_h.data, f_h) and np.array_equal(lifted.f_w.data, f_w)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.integers(0, 7), st.integers(0, 7), st.integers(0, 2**31))
def test_conv_equals_lifted_general(h, w, c, ih, iw, seed):
    kh_ext = 2 * (ih % h) + 1
    kw_ext = 2 * (iw % w) + 1
    rng = np.random.default_rng(seed)
    z = Tensor(rng.standard_normal((1, h, w, c)))
    kv = dw(rng.standard_normal((kh_ext, 1, 1, c)))
    kh = dw(rng.standard_normal((1, kw_ext, 1, c)))
    lifted = lift_conv_to_general(kv, kh, h, w)
    half = kh_ext // 2
    band = np.abs(np.arange(h)[:, None] - np.arange(h)[None, :]) > half
    assert not lifted.f_h.data[band].any()
    diff = np.abs(dfc_attention_conv(z, kv, kh).data - dfc_attention_general(z, lifted).data).max()
    assert diff < 1e-10


@pytest.mark.parametrize("h,w,c,kh,kw", [(4, 2, 3, 3, 1), (8, 8, 2, 5, 5), (7, 5, 1, 9, 3)])
def test_counted_costs_exact(rng, h, w, c, kh, kw):
    z = Tensor(rng.standard_normal((1, h, w, c)))
    with count_macs() as full:
        full_fc_attention(z, FullAttentionWeights(Tensor(np.zeros((h, w, h, w, c)))))
    with count_macs() as dec:
        dfc_attention_general(z, DecoupledWeights(Tensor(np.zeros((h, h, w, c))), Tensor(np.zeros((w, w, h, c)))))
    with count_macs() as conv:
        dfc_attention_conv(z, dw(np.zeros((kh, 1, 1, c))), dw(np.zeros((1, kw, 1, c))))
    assert full.macs == h * h * w * w * c
    assert dec.macs == (h * h * w + h * w * w) * c
    assert conv.macs == (kh + kw) * h * w * c


def test_channel_separation(rng):
    z = Tensor(rng.standard_normal((1, 5, 5, 3)))
    kv, kh = dw(rng.standard_normal((3, 1, 1, 3))), dw(rng.standard_normal((1, 3, 1, 3)))
    jac = jacobian_row(lambda t: dfc_attention_conv(t, kv, kh), z, (2, 2), 1)
    assert not jac[..., [0, 2]].any()
    assert jac[..., 1].any()


# --- DFC branch -----------------------------------------------------------


def test_branch_zero_input_gives_half(rng):
    branch = DfcBranch(3, 4, DfcConfig(kernel_h=3, kernel_w=3), rng=rng)
    y = dfc_branch(Tensor(np.zeros((1, 8, 6, 3))), branch)
    assert y.shape == (1, 8, 6, 4)
    assert np.all(y.data == 0.5)


def test_branch_downsampling_saves_75_percent(rng):
    x = Tensor(rng.standard_normal((1, 8, 8, 4)))
    counts = {}
    for f in (1, 2):
        branch = DfcBranch(4, 4, DfcConfig(kernel_h=5, kernel_w=5, downsample_factor=f), rng=np.random.default_rng(0))
        with count_macs() as cnt:
            branch(x)
        counts[f] = cnt.by_kind["conv_depthwise"]
    assert counts[1] == (5 + 5) * 8 * 8 * 4
    assert 4 * counts[2] == counts[1]


def _randomize_bn(branch, rng):
    for layer in (branch.query, branch.vertical, branch.horizontal):
        c = layer.bn.gamma.shape[0]
        layer.bn.gamma.data[...] = rng.uniform(0.5, 1.5, c)
        layer.bn.beta.data[...] = rng.standard_normal(c) * 0.2
        layer.bn.running_mean[...] = rng.standard_normal(c) * 0.2
        layer.bn.running_var[...] = rng.uniform(0.5, 2.0, c)


def test_branch_matches_scalar_pipeline(rng):
    x = rng.standard_normal((1, 4, 4, 2))
    branch = DfcBranch(2, 2, DfcConfig(kernel_h=3, kernel_w=3), rng=rng)
    _randomize_bn(branch, rng)
    got = branch(Tensor(x)).data

    def bn(v, layer, ch):
        b = layer.bn
        return (v - b.running_mean[ch]) / np.sqrt(b.running_var[ch] + b.eps) * b.gamma.data[ch] + b.beta.data[ch]

    pooled = np.stack([oracles.pool_loops(x[0, :, :, c], "max", 2, 2) for c in range(2)], axis=-1)[None]
    stages = []
    a = pooled
    for layer in (branch.query, branch.vertical, branch.horizontal):
        conv = oracles.conv2d_loops(a, layer.conv.weight.data, groups=layer.conv.groups)
        a = np.zeros_like(conv)
        for idx in np.ndindex(conv.shape):
            a[idx] = bn(conv[idx], layer, idx[3])
        stages.append(a)
    gate = np.vectorize(oracles.sigmoid)(a)
    expect = np.stack([oracles.bilinear_loops(gate[0, :, :, c], 4, 4) for c in range(2)], axis=-1)[None]
    np.testing.assert_allclose(got, expect, atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.sampled_from(["before-upsample", "after-upsample"]), st.integers(0, 2**31))
def test_branch_sigmoid_range(h, w, position, seed):
    rng = np.random.default_rng(seed)
    cfg = DfcConfig(kernel_h=3, kernel_w=3, scaling_position=position)
    branch = DfcBranch(2, 2, cfg, rng=rng)
    y = branch(Tensor(rng.standard_normal((1, h, w, 2)) * 3)).data
    assert y.shape == (1, h, w, 2)
    assert np.all((y >= 0) & (y <= 1))
    if position == "after-upsample":
        assert np.all((y > 0) & (y < 1))


def test_branch_odd_extent_round_trip(rng):
    branch = DfcBranch(2, 2, DfcConfig(kernel_h=3, kernel_w=3), rng=rng)
    with count_macs() as cnt:
        y = branch(Tensor(rng.standard_normal((1, 7, 5, 2))))
    assert y.shape == (1, 7, 5, 2)
    # depthwise convs ran on the ceil(7/2) x ceil(5/2) grid
    assert cnt.by_kind["conv_depthwise"] == (3 + 3) * 4 * 3 * 2


def test_branch_too_small_for_factor(rng):
    branch = DfcBranch(1, 2, DfcConfig(kernel_h=1, kernel_w=1, downsample_factor=4), rng=rng)
    with pytest.raises(ShapeError):
        branch(Tensor(np.ones((1, 3, 8, 1))))
