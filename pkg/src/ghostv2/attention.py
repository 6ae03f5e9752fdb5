"""Token-mixing attention maps: dense FC, decoupled FC, and the convolutional form.

Three levels of the same idea live here:

* :func:`full_fc_attention` mixes every token with every other token through
  per-channel weights ``F[h, w, h', w', c]``.
* :func:`dfc_attention_general` factors the mixing into a vertical pass over
  ``h'`` followed by a horizontal pass over ``w'``.
* :func:`dfc_attention_conv` shares those weights along the orthogonal axis,
  which turns each pass into a depthwise ``K_H x 1`` or ``1 x K_W`` convolution.

:func:`lift_conv_to_general` materializes the shared weights so the last two
can be compared entry for entry. :class:`DfcBranch` is the full attention
branch used to gate Ghost module outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .errors import ParameterError, ShapeError
from .nn import ConvBN, Layer, SummaryRow
from .ops import ConvKernel
from .tensor import Tensor, name_scope, record, require_nhwc, tally

POOL_KINDS = ("max", "avg")
UPSAMPLE_KINDS = ("bilinear", "bicubic")
SCALINGS = ("sigmoid", "hard-sigmoid", "clip")
SCALING_POSITIONS = ("before-upsample", "after-upsample")


@dataclass(frozen=True)
class FullAttentionWeights:
    f: Tensor  # (H, W, H, W, C)

    def __post_init__(self):
        s = self.f.shape
        if len(s) != 5 or s[0] != s[2] or s[1] != s[3]:
            raise ShapeError(f"full attention weights must be (H, W, H, W, C), got {s}")


@dataclass(frozen=True)
class DecoupledWeights:
    f_h: Tensor  # (H, H, W, C): vertical stage
    f_w: Tensor  # (W, W, H, C): horizontal stage

    def __post_init__(self):
        a, b = self.f_h.shape, self.f_w.shape
        if len(a) != 4 or len(b) != 4 or a[0] != a[1] or b[0] != b[1] or a[2] != b[0] or b[2] != a[0] or a[3] != b[3]:
            raise ShapeError(f"decoupled weights need F_H (H, H, W, C) and F_W (W, W, H, C), got {a} and {b}")


def full_fc_attention(z: Tensor, weights: FullAttentionWeights) -> Tensor:
    require_nhwc(z)
    f = weights.f
    n, h, w, c = z.shape
    if f.shape != (h, w, h, w, c):
        raise ShapeError(f"full attention weights {f.shape} do not match feature {z.shape}")
    zd, fd = z.data, f.data
    out = np.einsum("hwpqc,npqc->nhwc", fd, zd)
    tally("attention_full", macs=n * h * h * w * w * c)

    def vjp(g):
        return np.einsum("hwpqc,nhwc->npqc", fd, g), np.einsum("nhwc,npqc->hwpqc", g, zd)

    return record("attention_full", (z, f), out, vjp)


def dfc_attention_general(z: Tensor, weights: DecoupledWeights) -> Tensor:
    """Vertical pass ``a'[h,w] = sum_h' F_H[h,h',w] z[h',w]`` then horizontal
    pass ``a[h,w] = sum_w' F_W[w,w',h] a'[h,w']`` (all per channel)."""
    require_nhwc(z)
    n, h, w, c = z.shape
    fh, fw = weights.f_h, weights.f_w
    if fh.shape != (h, h, w, c) or fw.shape != (w, w, h, c):
        raise ShapeError(f"decoupled weights {fh.shape}/{fw.shape} do not match feature {z.shape}")
    zd, fhd, fwd = z.data, fh.data, fw.data
    mid = np.einsum("hpwc,npwc->nhwc", fhd, zd)
    out = np.einsum("wqhc,nhqc->nhwc", fwd, mid)
    tally("attention_decoupled", macs=n * (h * h * w + h * w * w) * c)

    def vjp(g):
        g_mid = np.einsum("wqhc,nhwc->nhqc", fwd, g)
        g_fw = np.einsum("nhwc,nhqc->wqhc", g, mid)
        g_z = np.einsum("hpwc,nhwc->npwc", fhd, g_mid)
        g_fh = np.einsum("nhwc,npwc->hpwc", g_mid, zd)
        return g_z, g_fh, g_fw

    return record("attention_decoupled", (z, fh, fw), out, vjp)


def _check_dfc_kernels(k_v: ConvKernel, k_h: ConvKernel):
    if not (k_v.is_depthwise and k_h.is_depthwise):
        raise ParameterError("DFC kernels must be depthwise")
    if k_v.kw != 1 or k_h.kh != 1:
        raise ParameterError(f"DFC needs a K_H x 1 vertical and a 1 x K_W horizontal kernel, got {k_v.shape} and {k_h.shape}")
    if k_v.kh % 2 == 0 or k_h.kw % 2 == 0:
        raise ParameterError(f"DFC kernel extents must be odd, got K_H={k_v.kh}, K_W={k_h.kw}")
    if k_v.c_out != k_h.c_out:
        raise ShapeError(f"DFC kernels disagree on channels: {k_v.shape} vs {k_h.shape}")


def dfc_attention_conv(z: Tensor, k_v: ConvKernel, k_h: ConvKernel) -> Tensor:
    _check_dfc_kernels(k_v, k_h)
    a = ops.conv2d_depthwise(z, k_v, padding="same")
    return ops.conv2d_depthwise(a, k_h, padding="same")


def _band(kernel_1d: np.ndarray, size: int) -> np.ndarray:
    """(size, size, C) matrix M with M[i, j] = kernel[j - i + K//2] inside the band."""
    k, c = kernel_1d.shape
    half = k // 2
    m = np.zeros((size, size, c), dtype=kernel_1d.dtype)
    for i in range(size):
        for j in range(size):
            t = j - i + half
            if 0 <= t < k:
                m[i, j] = kernel_1d[t]
    return m


def lift_conv_to_general(k_v: ConvKernel, k_h: ConvKernel, h: int, w: int) -> DecoupledWeights:
    _check_dfc_kernels(k_v, k_h)
    band_h = _band(k_v.weight.data[:, 0, 0, :], h)  # (H, H, C)
    band_w = _band(k_h.weight.data[0, :, 0, :], w)  # (W, W, C)
    f_h = np.broadcast_to(band_h[:, :, None, :], (h, h, w, band_h.shape[2])).copy()
    f_w = np.broadcast_to(band_w[:, :, None, :], (w, w, h, band_w.shape[2])).copy()
    return DecoupledWeights(Tensor.wrap(f_h), Tensor.wrap(f_w))


# ---------------------------------------------------------------------------
# attention branch


@dataclass(frozen=True)
class DfcConfig:
    kernel_h: int = 5
    kernel_w: int = 5
    downsample_factor: int = 2
    pool_kind: str = "max"
    upsample_kind: str = "bilinear"
    scaling: str = "sigmoid"
    scaling_position: str = "before-upsample"

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1 or self.kernel_h % 2 == 0 or self.kernel_w % 2 == 0:
            raise ParameterError(f"DFC kernel extents must be odd and positive, got ({self.kernel_h}, {self.kernel_w})")
        if self.downsample_factor < 1:
            raise ParameterError(f"downsample_factor must be >= 1, got {self.downsample_factor}")
        for value, allowed, label in (
            (self.pool_kind, POOL_KINDS, "pool_kind"),
            (self.upsample_kind, UPSAMPLE_KINDS, "upsample_kind"),
            (self.scaling, SCALINGS, "scaling"),
            (self.scaling_position, SCALING_POSITIONS, "scaling_position"),
        ):
            if value not in allowed:
                raise ParameterError(f"{label} must be one of {allowed}, got {value!r}")

    def with_kernels(self, kh: int, kw: int) -> "DfcConfig":
        return replace(self, kernel_h=kh, kernel_w=kw)


def apply_scaling(x: Tensor, scaling: str) -> Tensor:
    if scaling == "sigmoid":
        return ops.sigmoid(x)
    if scaling == "hard-sigmoid":
        return ops.hard_sigmoid(x)
    if scaling == "clip":
        return ops.clip01(x)
    raise ParameterError(f"unknown scaling {scaling!r}")


def pooled_extent(dim: int, factor: int) -> int:
    return -(-dim // factor)


class DfcBranch(Layer):
    """pool -> 1x1 query conv+BN -> (K_H x 1) dw conv+BN -> (1 x K_W) dw conv+BN
    -> scaling -> resize to the input extent (scaling and resize order per config).
    """

    def __init__(self, c_in, c_out, cfg: DfcConfig = DfcConfig(), *, rng, dtype=np.float64):
        self.cfg = cfg
        self.query = ConvBN(c_in, c_out, 1, relu=False, rng=rng, dtype=dtype)
        self.vertical = ConvBN(c_out, c_out, (cfg.kernel_h, 1), groups=c_out, relu=False, rng=rng, dtype=dtype)
        self.horizontal = ConvBN(c_out, c_out, (1, cfg.kernel_w), groups=c_out, relu=False, rng=rng, dtype=dtype)

    def forward(self, x, mode="eval"):
        require_nhwc(x)
        cfg = self.cfg
        _, h, w, _ = x.shape
        f = cfg.downsample_factor
        if h < f or w < f:
            raise ShapeError(f"cannot downsample {x.shape} by factor {f}")
        z = x
        if f > 1:
            with name_scope("pool"):
                z = ops.pool2d(x, cfg.pool_kind, f, f, ceil_mode=True)
        a = self.query(z, mode)
        a = self.vertical(a, mode)
        a = self.horizontal(a, mode)
        resized = a.shape[1:3] != (h, w)
        if cfg.scaling_position == "before-upsample":
            a = apply_scaling(a, cfg.scaling)
            if resized:
                a = ops.resize(a, h, w, cfg.upsample_kind)
        else:
            if resized:
                a = ops.resize(a, h, w, cfg.upsample_kind)
            a = apply_scaling(a, cfg.scaling)
        return a

    def summarize(self, in_shape, prefix=""):
        n, h, w, _ = in_shape
        f = self.cfg.downsample_factor
        p = prefix + self._local_name + "."
        s = (n, pooled_extent(h, f), pooled_extent(w, f), in_shape[3])
        rows = [SummaryRow(p + "pool", "pool", s, 0, 0)] if f > 1 else []
        for layer in (self.query, self.vertical, self.horizontal):
            s, more = layer.summarize(s, p)
            rows.extend(more)
        out = (n, h, w, s[3])
        rows.append(SummaryRow(p + "scale_resize", "resize", out, 0, 0))
        return out, rows

    @property
    def k_vertical(self) -> ConvKernel:
        return self.vertical.conv.kernel

    @property
    def k_horizontal(self) -> ConvKernel:
        return self.horizontal.conv.kernel


def dfc_branch(x: Tensor, p: DfcBranch, mode: str = "eval") -> Tensor:
    return p(x, mode)


def attention_costs(h: int, w: int, c: int, k_h: int, k_w: int) -> dict[str, int]:
    """Closed-form MAC counts of the three attention forms (per image)."""
    return {
        "full": h * h * w * w * c,
        "decoupled": (h * h * w + h * w * w) * c,
        "conv": (k_h + k_w) * h * w * c,
    }
