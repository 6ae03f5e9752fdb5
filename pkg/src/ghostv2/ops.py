"""Layer primitives over NHWC tensors, each with its own vector-Jacobian product.

Padding is zero padding. ``"same"`` pads ``k - 1`` in total per axis, split as
``(k - 1) // 2`` before and the remainder after, so even kernels put the extra
row/column at the bottom/right. Nothing here broadcasts silently: operands
either agree exactly or a :class:`ShapeError` is raised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import Tensor, record, require_nhwc, tally


@dataclass(frozen=True)
class ConvKernel:
    """A convolution weight of layout (kh, kw, c_in_per_group, c_out)."""

    weight: Tensor
    groups: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"kernel must be 4-D (kh, kw, c_in_per_group, c_out), got {self.weight.shape}")
        if self.groups < 1 or self.c_out % self.groups:
            raise ParameterError(f"groups={self.groups} does not divide c_out={self.c_out}")

    @property
    def shape(self):
        return self.weight.shape

    @property
    def kh(self) -> int:
        return self.weight.shape[0]

    @property
    def kw(self) -> int:
        return self.weight.shape[1]

    @property
    def c_in_per_group(self) -> int:
        return self.weight.shape[2]

    @property
    def c_in(self) -> int:
        return self.weight.shape[2] * self.groups

    @property
    def c_out(self) -> int:
        return self.weight.shape[3]

    @property
    def is_depthwise(self) -> bool:
        return self.c_in_per_group == 1 and self.groups == self.c_out

    @classmethod
    def depthwise(cls, weight) -> "ConvKernel":
        w = weight if isinstance(weight, Tensor) else Tensor(weight)
        return cls(w, groups=w.shape[3])


def same_padding(k: int) -> tuple[int, int]:
    total = k - 1
    return total // 2, total - total // 2


def _resolve_padding(padding, kh, kw):
    if isinstance(padding, str):
        if padding == "same":
            return same_padding(kh), same_padding(kw)
        if padding == "valid":
            return (0, 0), (0, 0)
        raise ParameterError(f"unknown padding mode {padding!r}")
    if isinstance(padding, int):
        return (padding, padding), (padding, padding)
    ph, pw = padding
    ph = (ph, ph) if isinstance(ph, int) else tuple(ph)
    pw = (pw, pw) if isinstance(pw, int) else tuple(pw)
    if min(ph + pw) < 0:
        raise ParameterError(f"negative padding {padding!r}")
    return ph, pw


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def conv_output_size(dim: int, k: int, stride: int, pad_lo: int, pad_hi: int) -> int:
    return (dim + pad_lo + pad_hi - k) // stride + 1


def _window(i, stride, n):
    return slice(i, i + stride * (n - 1) + 1, stride)


# ---------------------------------------------------------------------------
# convolutions


def conv2d(x: Tensor, k: ConvKernel, bias: Tensor | None = None, stride=1, padding="same") -> Tensor:
    """Grouped 2-D cross-correlation.

    ``out[n, h, w, o] = sum_{i, j, c} xpad[n, h*sh + i, w*sw + j, g(o)*cin_g + c] * k[i, j, c, o] + bias[o]``
    """
    require_nhwc(x)
    n, h, w, c = x.shape
    if k.c_in != c:
        raise ShapeError(f"channel mismatch: input {x.shape} vs kernel {k.shape} (groups={k.groups})")
    if bias is not None and bias.shape != (k.c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match c_out={k.c_out}")
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ParameterError(f"stride must be >= 1, got {stride!r}")
    (pt, pb), (pl, pr) = _resolve_padding(padding, k.kh, k.kw)
    if h + pt + pb < k.kh or w + pl + pr < k.kw:
        raise ShapeError(f"kernel {k.kh}x{k.kw} larger than padded input {h + pt + pb}x{w + pl + pr} (input {x.shape})")
    ho = conv_output_size(h, k.kh, sh, pt, pb)
    wo = conv_output_size(w, k.kw, sw, pl, pr)

    xd = x.data
    wd = k.weight.data
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else xd
    groups = k.groups
    cin_g = k.c_in_per_group
    cout = k.c_out
    depthwise = k.is_depthwise
    pointwise = k.kh == 1 and k.kw == 1 and groups == 1 and sh == 1 and sw == 1 and xp is xd

    if pointwise:
        out = (xd.reshape(-1, c) @ wd[0, 0]).reshape(n, h, w, cout)
    else:
        out = np.zeros((n, ho, wo, cout), dtype=np.result_type(xd, wd))
        for i in range(k.kh):
            for j in range(k.kw):
                patch = xp[:, _window(i, sh, ho), _window(j, sw, wo), :]
                if groups == 1:
                    out += patch @ wd[i, j]
                elif depthwise:
                    out += patch * wd[i, j, 0]
                else:
                    pg = patch.reshape(n, ho, wo, groups, cin_g)
                    wg = wd[i, j].reshape(cin_g, groups, cout // groups)
                    out += np.einsum("nhwgc,cgo->nhwgo", pg, wg).reshape(n, ho, wo, cout)
    if bias is not None:
        out = out + bias.data

    if k.kh == 1 and k.kw == 1 and groups == 1:
        kind = "conv_pointwise"
    elif depthwise:
        kind = "conv_depthwise"
    else:
        kind = "conv"
    tally(kind, macs=k.kh * k.kw * cin_g * cout * ho * wo * n)
    if bias is not None:
        tally("bias", elementwise=n * ho * wo * cout)

    def vjp(g):
        if pointwise:
            g2 = g.reshape(-1, cout)
            gx = (g2 @ wd[0, 0].T).reshape(xd.shape)
            gw = (xd.reshape(-1, c).T @ g2).reshape(wd.shape)
        else:
            gxp = np.zeros_like(xp)
            gw = np.zeros_like(wd)
            for i in range(k.kh):
                for j in range(k.kw):
                    sl = (slice(None), _window(i, sh, ho), _window(j, sw, wo), slice(None))
                    patch = xp[sl]
                    if groups == 1:
                        gxp[sl] += g @ wd[i, j].T
                        gw[i, j] = patch.reshape(-1, c).T @ g.reshape(-1, cout)
                    elif depthwise:
                        gxp[sl] += g * wd[i, j, 0]
                        gw[i, j, 0] = (patch * g).sum(axis=(0, 1, 2))
                    else:
                        gg = g.reshape(n, ho, wo, groups, cout // groups)
                        wg = wd[i, j].reshape(cin_g, groups, cout // groups)
                        gxp[sl] += np.einsum("nhwgo,cgo->nhwgc", gg, wg).reshape(n, ho, wo, c)
                        pg = patch.reshape(n, ho, wo, groups, cin_g)
                        gw[i, j] = np.einsum("nhwgc,nhwgo->cgo", pg, gg).reshape(cin_g, cout)
            gx = gxp[:, pt : pt + h, pl : pl + w, :]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    inputs = (x, k.weight) if bias is None else (x, k.weight, bias)
    return record(
        kind,
        inputs,
        out,
        vjp,
        kernel=(k.kh, k.kw, cin_g, cout),
        groups=groups,
        stride=(sh, sw),
        padding=((pt, pb), (pl, pr)),
        has_bias=bias is not None,
    )


def conv2d_pointwise(x: Tensor, k: ConvKernel, bias: Tensor | None = None) -> Tensor:
    if k.kh != 1 or k.kw != 1:
        raise ShapeError(f"pointwise conv needs a 1x1 kernel, got {k.shape}")
    return conv2d(x, k, bias, stride=1, padding="valid")


def conv2d_depthwise(x: Tensor, k: ConvKernel, stride=1, padding="same", bias: Tensor | None = None) -> Tensor:
    require_nhwc(x)
    if not k.is_depthwise or k.groups != x.shape[3]:
        raise ShapeError(f"depthwise conv needs groups == C: input {x.shape} vs kernel {k.shape} (groups={k.groups})")
    return conv2d(x, k, bias, stride=stride, padding=padding)


# ---------------------------------------------------------------------------
# normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    mode: str = "eval",
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization.

    In ``"train"`` mode the batch statistics normalize the input and the
    running arrays are updated in place (unbiased variance, PyTorch style).
    """
    require_nhwc(x)
    c = x.shape[3]
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    for name, v in (("gamma", gamma.shape), ("beta", beta.shape), ("running_mean", running_mean.shape), ("running_var", running_var.shape)):
        if v != (c,):
            raise ShapeError(f"{name} shape {v} does not match channels of {x.shape}")
    xd = x.data
    gd = gamma.data
    tally("batch_norm", elementwise=x.size)

    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean) * inv
        out = xhat * gd + beta.data

        def vjp(g):
            return g * (gd * inv), (g * xhat).sum(axis=(0, 1, 2)), g.sum(axis=(0, 1, 2))

    elif mode == "train":
        m = xd.shape[0] * xd.shape[1] * xd.shape[2]
        mean = xd.mean(axis=(0, 1, 2))
        centered = xd - mean
        var = (centered * centered).mean(axis=(0, 1, 2))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
        out = xhat * gd + beta.data
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def vjp(g):
            gxhat = g * gd
            s1 = gxhat.sum(axis=(0, 1, 2))
            s2 = (gxhat * xhat).sum(axis=(0, 1, 2))
            gx = (inv / m) * (m * gxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 1, 2)), g.sum(axis=(0, 1, 2))

    else:
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    return record("batch_norm", (x, gamma, beta), out.astype(xd.dtype, copy=False), vjp, mode=mode)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    xd = x.data
    tally("relu", elementwise=x.size)
    return record("relu", (x,), np.maximum(xd, 0), lambda g: (g * (xd > 0),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    tally("sigmoid", elementwise=x.size)
    return record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def hard_sigmoid(x: Tensor) -> Tensor:
    """clamp((x + 3) / 6, 0, 1)"""
    xd = x.data
    out = np.clip((xd + 3.0) / 6.0, 0.0, 1.0)
    tally("hard_sigmoid", elementwise=x.size)
    return record("hard_sigmoid", (x,), out, lambda g: (g * ((xd > -3.0) & (xd < 3.0)) / 6.0,))


def clip01(x: Tensor) -> Tensor:
    xd = x.data
    tally("clip", elementwise=x.size)
    return record("clip", (x,), np.clip(xd, 0.0, 1.0), lambda g: (g * ((xd > 0.0) & (xd < 1.0)),))


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    tally("add", elementwise=a.size)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    tally("mul", elementwise=a.size)
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply (N, H, W, C) by a per-sample channel gate of shape (N, 1, 1, C)."""
    require_nhwc(x)
    n, _, _, c = x.shape
    if s.shape != (n, 1, 1, c):
        raise ShapeError(f"scale_channels: gate {s.shape} does not match {(n, 1, 1, c)} for input {x.shape}")
    xd, sd = x.data, s.data
    tally("mul", elementwise=x.size)
    return record("scale_channels", (x, s), xd * sd, lambda g: (g * sd, (g * xd).sum(axis=(1, 2), keepdims=True)))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    require_nhwc(a, "first operand")
    require_nhwc(b, "second operand")
    if a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"concat: N/H/W mismatch between {a.shape} and {b.shape}")
    ca = a.shape[3]
    out = np.concatenate([a.data, b.data], axis=3)
    return record("concat", (a, b), out, lambda g: (g[..., :ca], g[..., ca:]))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    src = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def reduce_sum(x: Tensor) -> Tensor:
    src = x.data
    return record("sum", (x,), np.asarray(src.sum(), dtype=src.dtype), lambda g: (np.full_like(src, g),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) with a constant weight array of the same shape."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs input {x.shape}")
    out = np.asarray((x.data * weights).sum(), dtype=x.dtype)
    return record("weighted_sum", (x,), out, lambda g: (g * weights,))


def global_avg_pool(x: Tensor) -> Tensor:
    require_nhwc(x)
    n, h, w, c = x.shape
    tally("global_avg_pool", elementwise=x.size)
    out = x.data.mean(axis=(1, 2), keepdims=True)
    return record("global_avg_pool", (x,), out, lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D (N, classes), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ParameterError(f"labels must lie in [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=z.dtype)

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return record("softmax_cross_entropy", (logits,), loss, vjp)


# ---------------------------------------------------------------------------
# pooling and resizing


def pool_output_size(dim: int, window: int, stride: int, ceil_mode: bool) -> int:
    if ceil_mode:
        out = -(-(dim - window) // stride) + 1
        if (out - 1) * stride >= dim:
            out -= 1
        return out
    return (dim - window) // stride + 1


def pool2d(x: Tensor, kind: str, window, stride=None, ceil_mode: bool = True) -> Tensor:
    """Max or average pooling without input padding.

    With ``ceil_mode`` the last window may hang past the bottom/right edge;
    those windows are clipped, and the average divides by the number of real
    input cells it covers.
    """
    require_nhwc(x)
    wh, ww = _pair(window)
    if wh < 1 or ww < 1:
        raise ParameterError(f"pool window must be >= 1, got {window!r}")
    sh, sw = _pair(stride if stride is not None else (wh, ww))
    if sh < 1 or sw < 1:
        raise ParameterError(f"pool stride must be >= 1, got {stride!r}")
    if kind not in ("max", "avg"):
        raise ParameterError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    n, h, w, c = x.shape
    if wh > h or ww > w:
        raise ShapeError(f"pool window {wh}x{ww} exceeds input {x.shape}")
    ho = pool_output_size(h, wh, sh, ceil_mode)
    wo = pool_output_size(w, ww, sw, ceil_mode)
    pad_b = max(0, (ho - 1) * sh + wh - h)
    pad_r = max(0, (wo - 1) * sw + ww - w)
    xd = x.data
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(xd, ((0, 0), (0, pad_b), (0, pad_r), (0, 0)), constant_values=fill) if (pad_b or pad_r) else xd
    offsets = [(i, j) for i in range(wh) for j in range(ww)]
    tally("pool", elementwise=n * ho * wo * c * wh * ww)

    if kind == "max":
        best = xp[:, _window(0, sh, ho), _window(0, sw, wo), :].copy()
        arg = np.zeros(best.shape, dtype=np.int32)
        for idx, (i, j) in enumerate(offsets[1:], start=1):
            view = xp[:, _window(i, sh, ho), _window(j, sw, wo), :]
            take = view > best
            best = np.where(take, view, best)
            arg[take] = idx
        out = best

        def vjp(g):
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for idx, (i, j) in enumerate(offsets):
                gxp[:, _window(i, sh, ho), _window(j, sw, wo), :] += np.where(arg == idx, g, 0.0)
            return (gxp[:, :h, :w, :],)

    else:
        ones = np.pad(np.ones((h, w)), ((0, pad_b), (0, pad_r)))
        count = np.zeros((ho, wo))
        total = np.zeros((n, ho, wo, c), dtype=xd.dtype)
        for i, j in offsets:
            total += xp[:, _window(i, sh, ho), _window(j, sw, wo), :]
            count += ones[_window(i, sh, ho), _window(j, sw, wo)]
        cnt = count[None, :, :, None].astype(xd.dtype)
        out = total / cnt

        def vjp(g):
            gq = g / cnt
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i, j in offsets:
                gxp[:, _window(i, sh, ho), _window(j, sw, wo), :] += gq
            return (gxp[:, :h, :w, :],)

    return record("pool", (x,), out, vjp, kind=kind, window=(wh, ww), stride=(sh, sw))


def _cubic(t: float, a: float = -0.75) -> tuple[float, float, float, float]:
    def near(d):
        return ((a + 2) * d - (a + 3)) * d * d + 1

    def far(d):
        return ((a * d - 5 * a) * d + 8 * a) * d - 4 * a

    return far(t + 1), near(t), near(1 - t), far(2 - t)


def interpolation_matrix(n_in: int, n_out: int, kind: str = "bilinear") -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix with half-pixel alignment."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        if kind == "bilinear":
            src = max(src, 0.0)
            i0 = min(int(math.floor(src)), n_in - 1)
            i1 = min(i0 + 1, n_in - 1)
            lam = src - i0
            m[o, i0] += 1.0 - lam
            m[o, i1] += lam
        elif kind == "bicubic":
            i0 = int(math.floor(src))
            for tap, wt in zip(range(i0 - 1, i0 + 3), _cubic(src - i0)):
                m[o, min(max(tap, 0), n_in - 1)] += wt
        else:
            raise ParameterError(f"resize kind must be 'bilinear' or 'bicubic', got {kind!r}")
    return m


def resize(x: Tensor, out_h: int, out_w: int, kind: str = "bilinear") -> Tensor:
    require_nhwc(x)
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"output size must be >= 1, got {out_h}x{out_w}")
    n, h, w, c = x.shape
    mh = interpolation_matrix(h, out_h, kind).astype(x.dtype)
    mw = interpolation_matrix(w, out_w, kind).astype(x.dtype)
    tmp = np.tensordot(mh, x.data, axes=([1], [1])).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(np.tensordot(mw, tmp, axes=([1], [2])).transpose(1, 2, 0, 3))
    taps = 4 if kind == "bilinear" else 16
    tally("resize", elementwise=n * out_h * out_w * c * taps)

    def vjp(g):
        gt = np.tensordot(mw.T, g, axes=([1], [2])).transpose(1, 2, 0, 3)
        gx = np.tensordot(mh.T, gt, axes=([1], [1])).transpose(1, 0, 2, 3)
        return (np.ascontiguousarray(gx),)

    return record("resize", (x,), out, vjp, kind=kind, size=(out_h, out_w))


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    return resize(x, out_h, out_w, "bilinear")


def bicubic_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    return resize(x, out_h, out_w, "bicubic")
