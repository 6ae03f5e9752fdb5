"""Finite-difference suite over every differentiable primitive and composite block.

Each case builds random f64 inputs for one shape and reduces the op's output
with a fixed random weighting, so every output entry contributes to the
scalar being differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .attention import DecoupledWeights, DfcBranch, DfcConfig, FullAttentionWeights, dfc_attention_conv, dfc_attention_general, full_fc_attention
from .blocks import PLACEMENTS, BottleneckConfig, GhostBottleneck, GhostModule
from .gradcheck import GradCheckReport, grad_check
from .ops import ConvKernel
from .tensor import Tensor


@dataclass
class GradCase:
    name: str
    shapes: list[tuple]
    build: Callable  # (shape, rng) -> (fn, inputs)
    max_checks: int | None = None


@dataclass
class CaseResult:
    name: str
    shape: tuple
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _t(rng, shape, lo=None, hi=None):
    if lo is None:
        return Tensor.wrap(rng.standard_normal(shape))
    return Tensor.wrap(rng.uniform(lo, hi, size=shape))


def _reduce(rng, op):
    """Wrap ``op`` so its output is folded to a scalar with fixed random weights."""
    cache = {}

    def fn(*xs):
        y = op(*xs)
        if "w" not in cache:
            cache["w"] = rng.standard_normal(y.shape)
        return ops.weighted_sum(y, cache["w"])

    return fn


def _unary(op, lo=None, hi=None):
    def build(shape, rng):
        return _reduce(rng, op), [_t(rng, shape, lo, hi)]

    return build


def _conv(kind, stride=1, bias=False):
    def build(shape, rng):
        n, h, w, c = shape
        if kind == "pointwise":
            wt, groups = _t(rng, (1, 1, c, c + 1)), 1
        elif kind == "depthwise":
            wt, groups = _t(rng, (3, 3, 1, c)), c
        elif kind == "grouped":
            wt, groups = _t(rng, (3, 3, c // 2, c), None), 2
        elif kind == "vertical":
            wt, groups = _t(rng, (5, 1, 1, c)), c
        else:
            wt, groups = _t(rng, (3, 3, c, 3)), 1
        b = _t(rng, (wt.shape[3],)) if bias else None
        inputs = [_t(rng, shape), wt] + ([b] if bias else [])

        def op(x, wt, b=None):
            return ops.conv2d(x, ConvKernel(wt, groups), b, stride=stride)

        return _reduce(rng, op), inputs

    return build


def _bn(mode):
    def build(shape, rng):
        c = shape[3]
        mean = rng.standard_normal(c)
        var = rng.uniform(0.5, 2.0, c)

        def op(x, g, b):
            return ops.batch_norm(x, g, b, mean.copy(), var.copy(), mode=mode)

        return _reduce(rng, op), [_t(rng, shape), _t(rng, (c,), 0.5, 1.5), _t(rng, (c,))]

    return build


def _binary(op):
    def build(shape, rng):
        return _reduce(rng, op), [_t(rng, shape), _t(rng, shape)]

    return build


def _scale_channels(shape, rng):
    s = (shape[0], 1, 1, shape[3])
    return _reduce(rng, ops.scale_channels), [_t(rng, shape), _t(rng, s)]


def _concat(shape, rng):
    other = shape[:3] + (shape[3] + 1,)
    return _reduce(rng, ops.concat_channels), [_t(rng, shape), _t(rng, other)]


def _reshape(shape, rng):
    n = shape[0]
    return _reduce(rng, lambda x: ops.reshape(x, (n, x.size // n))), [_t(rng, shape)]


def _reduce_sum(shape, rng):
    return (lambda x: ops.reduce_sum(x)), [_t(rng, shape)]


def _cross_entropy(shape, rng):
    n, k = shape
    labels = rng.integers(0, k, size=n)
    return (lambda z: ops.softmax_cross_entropy(z, labels)), [_t(rng, shape)]


def _pool(kind, window):
    return _unary(lambda x: ops.pool2d(x, kind, window))


def _resize(kind):
    def build(shape, rng):
        _, h, w, _ = shape
        return _reduce(rng, lambda x: ops.resize(x, 2 * h + 1, 2 * w - 1, kind)), [_t(rng, shape)]

    return build


def _full_attention(shape, rng):
    n, h, w, c = shape
    return _reduce(rng, lambda z, f: full_fc_attention(z, FullAttentionWeights(f))), [_t(rng, shape), _t(rng, (h, w, h, w, c))]


def _decoupled(shape, rng):
    n, h, w, c = shape
    op = lambda z, fh, fw: dfc_attention_general(z, DecoupledWeights(fh, fw))  # noqa: E731
    return _reduce(rng, op), [_t(rng, shape), _t(rng, (h, h, w, c)), _t(rng, (w, w, h, c))]


def _dfc_conv(shape, rng):
    c = shape[3]
    op = lambda z, kv, kh: dfc_attention_conv(z, ConvKernel.depthwise(kv), ConvKernel.depthwise(kh))  # noqa: E731
    return _reduce(rng, op), [_t(rng, shape), _t(rng, (3, 1, 1, c)), _t(rng, (1, 5, 1, c))]


def _layer_case(make, mode="eval"):
    """Check a layer's gradient w.r.t. its input and all of its parameters.

    Eval mode with randomized BN statistics: in train mode a per-channel scale
    feeding a depthwise conv and another batch norm is normalized away, and
    the resulting exact-zero gradients make relative error meaningless.
    """

    def build(shape, rng):
        layer = make(shape, rng)
        for name, buf in layer.named_buffers():
            if name.endswith("running_var"):
                buf[...] = rng.uniform(0.5, 2.0, buf.shape)
            else:
                buf[...] = 0.3 * rng.standard_normal(buf.shape)
        for name, p in layer.named_parameters():
            if name.endswith("gamma"):
                p.data[...] = rng.uniform(0.5, 1.5, p.shape)
            elif name.endswith("beta"):
                p.data[...] = 0.3 * rng.standard_normal(p.shape)
        params = layer.parameters()

        def op(x, *_params):
            return layer(x, mode)

        return _reduce(rng, op), [_t(rng, shape)] + params

    return build


def _dfc_branch(cfg: DfcConfig):
    return _layer_case(lambda s, rng: DfcBranch(s[3], s[3] + 2, cfg, rng=rng))


def _ghost(dfc):
    return _layer_case(lambda s, rng: GhostModule(s[3], 2 * s[3], relu=True, dfc=dfc, rng=rng))


def _bottleneck(placement, stride=1):
    def make(shape, rng):
        c = shape[3]
        cfg = BottleneckConfig(c, 2 * c, c if stride == 1 else c + 2, stride, placement, DfcConfig(kernel_h=3, kernel_w=3), se=stride == 2)
        return GhostBottleneck(cfg, rng=rng)

    return _layer_case(make)


SHAPES_4D = [(1, 3, 4, 2), (2, 4, 4, 3), (1, 5, 3, 4)]
EVEN_4D = [(1, 4, 4, 2), (2, 6, 4, 4), (1, 4, 6, 2)]
DFC_SHAPES = [(1, 6, 6, 2), (2, 4, 6, 3), (1, 5, 7, 2)]
BOTTLENECK_SHAPES = [(1, 8, 8, 16), (2, 6, 6, 4), (1, 4, 6, 8)]


def primitive_cases() -> list[GradCase]:
    return [
        GradCase("conv2d_pointwise", SHAPES_4D, _conv("pointwise")),
        GradCase("conv2d_depthwise", SHAPES_4D, _conv("depthwise")),
        GradCase("conv2d_depthwise_vertical", SHAPES_4D, _conv("vertical")),
        GradCase("conv2d_dense", SHAPES_4D, _conv("dense")),
        GradCase("conv2d_grouped", EVEN_4D, _conv("grouped")),
        GradCase("conv2d_stride2_bias", SHAPES_4D, _conv("dense", stride=2, bias=True)),
        GradCase("conv2d_depthwise_stride2", SHAPES_4D, _conv("depthwise", stride=2)),
        GradCase("batch_norm_train", SHAPES_4D, _bn("train")),
        GradCase("batch_norm_eval", SHAPES_4D, _bn("eval")),
        GradCase("relu", SHAPES_4D, _unary(ops.relu)),
        GradCase("sigmoid", SHAPES_4D, _unary(ops.sigmoid, -4, 4)),
        GradCase("hard_sigmoid", SHAPES_4D, _unary(ops.hard_sigmoid, -5, 5)),
        GradCase("clip", SHAPES_4D, _unary(ops.clip01, -0.5, 1.5)),
        GradCase("add", SHAPES_4D, _binary(ops.add)),
        GradCase("mul", SHAPES_4D, _binary(ops.mul)),
        GradCase("scale_channels", SHAPES_4D, _scale_channels),
        GradCase("concat_channels", SHAPES_4D, _concat),
        GradCase("reshape", SHAPES_4D, _reshape),
        GradCase("reduce_sum", SHAPES_4D, _reduce_sum),
        GradCase("global_avg_pool", SHAPES_4D, _unary(ops.global_avg_pool)),
        GradCase("softmax_cross_entropy", [(1, 3), (4, 5), (3, 2)], _cross_entropy),
        GradCase("max_pool", SHAPES_4D, _pool("max", 2)),
        GradCase("avg_pool", SHAPES_4D, _pool("avg", 2)),
        GradCase("resize_bilinear", SHAPES_4D, _resize("bilinear")),
        GradCase("resize_bicubic", SHAPES_4D, _resize("bicubic")),
        GradCase("full_fc_attention", [(1, 2, 3, 2), (2, 3, 3, 1), (1, 4, 2, 3)], _full_attention),
        GradCase("dfc_attention_general", SHAPES_4D, _decoupled),
        GradCase("dfc_attention_conv", DFC_SHAPES, _dfc_conv),
    ]


def composite_cases() -> list[GradCase]:
    cases = [
        GradCase("dfc_branch_default", DFC_SHAPES, _dfc_branch(DfcConfig(kernel_h=3, kernel_w=3))),
        GradCase(
            "dfc_branch_avg_bicubic_after",
            DFC_SHAPES,
            _dfc_branch(DfcConfig(3, 3, 2, "avg", "bicubic", "hard-sigmoid", "after-upsample")),
        ),
        GradCase("ghost_module", DFC_SHAPES, _ghost(None)),
        GradCase("ghost_module_attn", DFC_SHAPES, _ghost(DfcConfig(kernel_h=3, kernel_w=3))),
    ]
    for placement in PLACEMENTS:
        cases.append(GradCase(f"bottleneck_{placement}", BOTTLENECK_SHAPES, _bottleneck(placement), max_checks=40))
    cases.append(GradCase("bottleneck_stride2_se", [(1, 8, 8, 4), (2, 6, 6, 4), (1, 4, 8, 2)], _bottleneck("both", 2), max_checks=40))
    return cases


def all_cases() -> list[GradCase]:
    return primitive_cases() + composite_cases()


def run_case(case: GradCase, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> list[CaseResult]:
    out = []
    for i, shape in enumerate(case.shapes):
        rng = np.random.default_rng([seed, i])
        fn, inputs = case.build(tuple(shape), rng)
        report = grad_check(fn, inputs, eps=eps, tol=tol, max_checks=case.max_checks, seed=seed)
        out.append(CaseResult(case.name, tuple(shape), report))
    return out


def run_suite(cases=None, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> list[CaseResult]:
    results = []
    for case in cases if cases is not None else all_cases():
        results.extend(run_case(case, seed, eps, tol))
    return results
