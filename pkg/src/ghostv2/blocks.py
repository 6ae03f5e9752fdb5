"""Ghost modules, attention-gated Ghost modules, and the GhostV2 bottleneck."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attention import DfcBranch, DfcConfig
from .errors import ConfigError, ShapeError
from .nn import Conv, ConvBN, Layer, SummaryRow
from .tensor import Tensor

PLACEMENTS = ("none", "expanded", "output", "both")


def make_divisible(v: float, divisor: int = 4) -> int:
    """Round to the nearest multiple of ``divisor`` without dropping more than 10%."""
    new = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new < 0.9 * v:
        new += divisor
    return new


class GhostModule(Layer):
    """Half the output channels from a 1x1 conv, half from a depthwise conv of those.

    With ``dfc`` set, the concatenated features are gated elementwise by a
    DFC attention map computed from the same input.
    """

    def __init__(self, c_in, c_out, relu=True, cheap_kernel=3, norm=True, dfc: DfcConfig | None = None, *, rng, dtype=np.float64):
        if c_out % 2:
            raise ConfigError(f"Ghost module output channels must be even, got {c_out}")
        intrinsic = c_out // 2
        self.c_in = c_in
        self.c_out = c_out
        self.primary = ConvBN(c_in, intrinsic, 1, relu=relu, rng=rng, dtype=dtype)
        self.cheap = ConvBN(intrinsic, intrinsic, cheap_kernel, groups=intrinsic, relu=relu, rng=rng, dtype=dtype)
        if not norm:
            self.primary.bn = None
            self.cheap.bn = None
        self.dfc = DfcBranch(c_in, c_out, dfc, rng=rng, dtype=dtype) if dfc is not None else None

    @property
    def intrinsic_channels(self) -> int:
        return self.c_out // 2

    def ghost_features(self, x: Tensor, mode="eval") -> Tensor:
        intrinsic = self.primary(x, mode)
        return ops.concat_channels(intrinsic, self.cheap(intrinsic, mode))

    def forward(self, x, mode="eval"):
        y = self.ghost_features(x, mode)
        if self.dfc is None:
            return y
        return ops.mul(self.dfc(x, mode), y)

    def summarize(self, in_shape, prefix=""):
        p = prefix + self._local_name + "."
        s, rows = self.primary.summarize(in_shape, p)
        _, more = self.cheap.summarize(s, p)
        rows += more
        out = s[:3] + (self.c_out,)
        if self.dfc is not None:
            _, more = self.dfc.summarize(in_shape, p)
            rows += more
        return out, rows


def ghost_module(x: Tensor, p: GhostModule, mode: str = "eval") -> Tensor:
    return p.ghost_features(x, mode)


def ghost_module_attn(x: Tensor, p: GhostModule, dfc: DfcBranch, mode: str = "eval") -> Tensor:
    """Elementwise product of the attention map and the Ghost features of ``x``."""
    y = p.ghost_features(x, mode)
    a = dfc(x, mode)
    if a.shape != y.shape:
        raise AssertionError(f"attention map {a.shape} and Ghost output {y.shape} disagree")
    return ops.mul(a, y)


class SqueezeExcite(Layer):
    def __init__(self, c, ratio=4, *, rng, dtype=np.float64):
        mid = make_divisible(c / ratio)
        self.reduce = Conv(c, mid, 1, bias=True, rng=rng, dtype=dtype)
        self.expand = Conv(mid, c, 1, bias=True, rng=rng, dtype=dtype)

    def forward(self, x, mode="eval"):
        s = ops.global_avg_pool(x)
        s = ops.relu(self.reduce(s, mode))
        s = ops.hard_sigmoid(self.expand(s, mode))
        return ops.scale_channels(x, s)

    def summarize(self, in_shape, prefix=""):
        p = prefix + self._local_name + "."
        pooled = (in_shape[0], 1, 1, in_shape[3])
        s, rows = self.reduce.summarize(pooled, p)
        _, more = self.expand.summarize(s, p)
        return in_shape, rows + more


@dataclass
class BottleneckConfig:
    c_in: int
    c_expand: int
    c_out: int
    stride: int = 1
    attention_placement: str = "expanded"
    dfc: DfcConfig = field(default_factory=DfcConfig)
    dw_kernel: int = 3
    se: bool = False

    def validate(self):
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.c_expand < self.c_in:
            raise ConfigError(f"c_expand={self.c_expand} must be >= c_in={self.c_in}")
        if self.attention_placement not in PLACEMENTS:
            raise ConfigError(f"attention_placement must be one of {PLACEMENTS}, got {self.attention_placement!r}")
        for name in ("c_in", "c_expand", "c_out"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("c_expand", "c_out"):
            if getattr(self, name) % 2:
                raise ConfigError(f"{name}={getattr(self, name)} must be even for a Ghost module")
        if self.dw_kernel < 1 or self.dw_kernel % 2 == 0:
            raise ConfigError(f"dw_kernel must be odd, got {self.dw_kernel}")
        return self

    @property
    def identity_shortcut(self) -> bool:
        return self.stride == 1 and self.c_in == self.c_out


class GhostBottleneck(Layer):
    """Inverted residual: expand (Ghost, ReLU) -> [stride-2 dw] -> [SE] -> project (Ghost, linear) + shortcut."""

    def __init__(self, cfg: BottleneckConfig, *, rng, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        gate_expanded = cfg.attention_placement in ("expanded", "both")
        gate_output = cfg.attention_placement in ("output", "both")
        self.ghost1 = GhostModule(cfg.c_in, cfg.c_expand, relu=True, dfc=cfg.dfc if gate_expanded else None, rng=rng, dtype=dtype)
        self.conv_dw = (
            ConvBN(cfg.c_expand, cfg.c_expand, cfg.dw_kernel, stride=2, groups=cfg.c_expand, relu=False, rng=rng, dtype=dtype)
            if cfg.stride == 2
            else None
        )
        self.se = SqueezeExcite(cfg.c_expand, rng=rng, dtype=dtype) if cfg.se else None
        self.ghost2 = GhostModule(cfg.c_expand, cfg.c_out, relu=False, dfc=cfg.dfc if gate_output else None, rng=rng, dtype=dtype)
        if cfg.identity_shortcut:
            self.shortcut_dw = None
            self.shortcut_pw = None
        else:
            self.shortcut_dw = ConvBN(cfg.c_in, cfg.c_in, cfg.dw_kernel, stride=cfg.stride, groups=cfg.c_in, relu=False, rng=rng, dtype=dtype)
            self.shortcut_pw = ConvBN(cfg.c_in, cfg.c_out, 1, relu=False, rng=rng, dtype=dtype)

    def forward(self, x, mode="eval"):
        y = self.ghost1(x, mode)
        if self.conv_dw is not None:
            y = self.conv_dw(y, mode)
        if self.se is not None:
            y = self.se(y, mode)
        y = self.ghost2(y, mode)
        if self.shortcut_dw is None:
            res = x
        else:
            res = self.shortcut_pw(self.shortcut_dw(x, mode), mode)
        return ops.add(y, res)

    def summarize(self, in_shape, prefix=""):
        p = prefix + self._local_name + "."
        rows: list[SummaryRow] = []
        s = in_shape
        for layer in (self.ghost1, self.conv_dw, self.se, self.ghost2):
            if layer is not None:
                s, more = layer.summarize(s, p)
                rows += more
        if self.shortcut_dw is not None:
            r, more = self.shortcut_dw.summarize(in_shape, p)
            rows += more
            _, more = self.shortcut_pw.summarize(r, p)
            rows += more
        return s, rows


def ghostv2_bottleneck(x: Tensor, block: GhostBottleneck, mode: str = "eval") -> Tensor:
    if x.shape[3] != block.cfg.c_in:
        raise ShapeError(f"bottleneck expects {block.cfg.c_in} input channels, got {x.shape}")
    return block(x, mode)

