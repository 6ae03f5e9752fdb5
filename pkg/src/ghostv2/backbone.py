"""Config-driven GhostNetV2 backbone.

A :class:`ModelSpec` is loaded from a YAML file (see ``configs/default.yaml``
for the schema) and turned into a :class:`GhostNetV2` by :func:`build_model`.
Channel counts are scaled by the width multiplier and rounded to multiples of
four; the head's pooled feature width is not scaled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import ops
from .attention import DfcConfig
from .blocks import PLACEMENTS, BottleneckConfig, GhostBottleneck, make_divisible
from .errors import ConfigError, ShapeError
from .nn import Conv, ConvBN, Layer, SummaryRow
from .tensor import Tensor

BUILTIN_CONFIGS = ("default", "mini")


@dataclass(frozen=True)
class BlockSpec:
    dw_kernel: int
    expand: int
    out: int
    se: bool = False
    stride: int = 1


@dataclass(frozen=True)
class StageSpec:
    blocks: tuple[BlockSpec, ...]
    kernel: tuple[int, int] = (5, 5)
    placement: str = "expanded"


@dataclass(frozen=True)
class ModelSpec:
    stages: tuple[StageSpec, ...]
    name: str = "ghostnetv2"
    input_size: int = 224
    in_channels: int = 3
    stem_channels: int = 16
    stem_stride: int = 2
    head_conv: int = 960
    head_features: int = 1280
    num_classes: int = 1000
    width_multiplier: float = 1.0
    dfc: DfcConfig = field(default_factory=DfcConfig)

    def scaled(self, width: float) -> "ModelSpec":
        return replace(self, width_multiplier=float(width))

    def with_placement(self, placement: str) -> "ModelSpec":
        return replace(self, stages=tuple(replace(s, placement=placement) for s in self.stages))

    def channels(self, base: int) -> int:
        return make_divisible(base * self.width_multiplier, 4)

    @property
    def total_stride(self) -> int:
        return self.stem_stride * math.prod(b.stride for s in self.stages for b in s.blocks)

    def validate(self) -> "ModelSpec":
        if self.width_multiplier <= 0:
            raise ConfigError(f"width_multiplier must be positive, got {self.width_multiplier}")
        if self.stem_stride not in (1, 2):
            raise ConfigError(f"stem stride must be 1 or 2, got {self.stem_stride}")
        if not self.stages:
            raise ConfigError("spec has no stages")
        for i, stage in enumerate(self.stages):
            if stage.placement not in PLACEMENTS:
                raise ConfigError(f"stage {i}: placement must be one of {PLACEMENTS}, got {stage.placement!r}")
            kh, kw = stage.kernel
            if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
                raise ConfigError(f"stage {i}: DFC kernel extents must be odd, got {stage.kernel}")
            if not stage.blocks:
                raise ConfigError(f"stage {i}: no blocks")
            for j, b in enumerate(stage.blocks):
                if b.stride not in (1, 2):
                    raise ConfigError(f"stage {i} block {j}: stride must be 1 or 2, got {b.stride}")
                if b.expand < 1 or b.out < 1:
                    raise ConfigError(f"stage {i} block {j}: channel counts must be positive")
        try:
            self.block_configs()
        except ConfigError as exc:
            raise ConfigError(f"invalid spec {self.name!r}: {exc}") from None
        return self

    def block_configs(self) -> list[tuple[int, BottleneckConfig]]:
        """(stage index, resolved bottleneck config) for every block, in order."""
        out = []
        c = self.channels(self.stem_channels)
        for i, stage in enumerate(self.stages):
            dfc = self.dfc.with_kernels(*stage.kernel)
            for j, b in enumerate(stage.blocks):
                cfg = BottleneckConfig(
                    c_in=c,
                    c_expand=self.channels(b.expand),
                    c_out=self.channels(b.out),
                    stride=b.stride,
                    attention_placement=stage.placement,
                    dfc=dfc,
                    dw_kernel=b.dw_kernel,
                    se=b.se,
                )
                try:
                    cfg.validate()
                except ConfigError as exc:
                    raise ConfigError(f"stage {i} block {j}: {exc}") from None
                out.append((i, cfg))
                c = cfg.c_out
        return out


# ---------------------------------------------------------------------------
# spec files

_TOP_KEYS = {"name", "input_size", "in_channels", "width_multiplier", "stem", "dfc", "stages", "head"}
_STEM_KEYS = {"out_channels", "stride"}
_HEAD_KEYS = {"conv_channels", "pooled_features", "num_classes"}
_STAGE_KEYS = {"kernel", "placement", "blocks"}
_BLOCK_KEYS = {"k", "exp", "out", "se", "stride"}
_DFC_KEYS = {"downsample_factor", "pool_kind", "upsample_kind", "scaling", "scaling_position"}


def _check_keys(mapping, allowed, where):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(mapping).__name__}")
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def spec_from_dict(d: dict) -> ModelSpec:
    _check_keys(d, _TOP_KEYS, "spec")
    if "stages" not in d:
        raise ConfigError("spec: missing 'stages'")
    stem = d.get("stem", {})
    _check_keys(stem, _STEM_KEYS, "stem")
    head = d.get("head", {})
    _check_keys(head, _HEAD_KEYS, "head")
    dfc = d.get("dfc", {})
    _check_keys(dfc, _DFC_KEYS, "dfc")
    stages = []
    for i, s in enumerate(d["stages"]):
        _check_keys(s, _STAGE_KEYS, f"stages[{i}]")
        blocks = []
        for j, b in enumerate(s.get("blocks", [])):
            _check_keys(b, _BLOCK_KEYS, f"stages[{i}].blocks[{j}]")
            missing = {"exp", "out"} - set(b)
            if missing:
                raise ConfigError(f"stages[{i}].blocks[{j}]: missing {', '.join(sorted(missing))}")
            blocks.append(BlockSpec(int(b.get("k", 3)), int(b["exp"]), int(b["out"]), bool(b.get("se", False)), int(b.get("stride", 1))))
        kernel = s.get("kernel", [5, 5])
        if isinstance(kernel, int):
            kernel = [kernel, kernel]
        stages.append(StageSpec(tuple(blocks), (int(kernel[0]), int(kernel[1])), str(s.get("placement", "expanded"))))
    try:
        dfc_cfg = DfcConfig(**dfc)
    except Exception as exc:
        raise ConfigError(f"dfc: {exc}") from None
    spec = ModelSpec(
        stages=tuple(stages),
        name=str(d.get("name", "ghostnetv2")),
        input_size=int(d.get("input_size", 224)),
        in_channels=int(d.get("in_channels", 3)),
        stem_channels=int(stem.get("out_channels", 16)),
        stem_stride=int(stem.get("stride", 2)),
        head_conv=int(head.get("conv_channels", 960)),
        head_features=int(head.get("pooled_features", 1280)),
        num_classes=int(head.get("num_classes", 1000)),
        width_multiplier=float(d.get("width_multiplier", 1.0)),
        dfc=dfc_cfg,
    )
    return spec.validate()


def load_spec(path_or_name: str | Path = "default") -> ModelSpec:
    """Load a spec from a YAML file, or one of the bundled names ``default``/``mini``."""
    if str(path_or_name) in BUILTIN_CONFIGS:
        text = resources.files("ghostv2.configs").joinpath(f"{path_or_name}.yaml").read_text()
    else:
        text = Path(path_or_name).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed spec file {path_or_name}: {exc}") from None
    return spec_from_dict(data)


# ---------------------------------------------------------------------------
# model


class GhostNetV2(Layer):
    def __init__(self, spec: ModelSpec, *, rng, dtype=np.float64):
        spec.validate()
        self.spec = spec
        self._stage_of = []
        stem_c = spec.channels(spec.stem_channels)
        self.stem = ConvBN(spec.in_channels, stem_c, 3, stride=spec.stem_stride, relu=True, rng=rng, dtype=dtype)
        blocks = []
        for stage, cfg in spec.block_configs():
            blocks.append(GhostBottleneck(cfg, rng=rng, dtype=dtype))
            self._stage_of.append(stage)
        self.blocks = blocks
        last = blocks[-1].cfg.c_out
        head_c = spec.channels(spec.head_conv)
        self.final = ConvBN(last, head_c, 1, relu=True, rng=rng, dtype=dtype)
        self.conv_head = Conv(head_c, spec.head_features, 1, bias=True, rng=rng, dtype=dtype)
        self.classifier = Conv(spec.head_features, spec.num_classes, 1, bias=True, rng=rng, dtype=dtype)
        # zero-initialized classifier: a fresh model predicts the uniform distribution
        self.classifier.weight.data[...] = 0.0

    @property
    def stage_of_block(self) -> list[int]:
        return list(self._stage_of)

    @property
    def dtype(self):
        return self.stem.conv.weight.dtype

    def check_input(self, x: Tensor):
        if x.ndim != 4:
            raise ShapeError(f"input must be (N, H, W, C), got {x.shape}")
        n, h, w, c = x.shape
        s = self.spec.total_stride
        if c != self.spec.in_channels:
            raise ShapeError(f"expected {self.spec.in_channels} input channels, got {x.shape}")
        if h % s or w % s:
            raise ShapeError(f"input spatial size {h}x{w} must be divisible by the total stride {s}")

    def features(self, x: Tensor, mode="eval") -> Tensor:
        self.check_input(x)
        y = self.stem(x, mode)
        for block in self.blocks:
            y = block(y, mode)
        return self.final(y, mode)

    def forward(self, x, mode="eval"):
        y = ops.global_avg_pool(self.features(x, mode))
        y = ops.relu(self.conv_head(y, mode))
        y = self.classifier(y, mode)
        return ops.reshape(y, (y.shape[0], y.shape[3]))

    def summarize(self, in_shape=None, prefix=""):
        if in_shape is None:
            in_shape = (1, self.spec.input_size, self.spec.input_size, self.spec.in_channels)
        s, rows = self.stem.summarize(in_shape, prefix)
        for block in self.blocks:
            s, more = block.summarize(s, prefix)
            rows += more
        s, more = self.final.summarize(s, prefix)
        rows += more
        pooled = (s[0], 1, 1, s[3])
        s, more = self.conv_head.summarize(pooled, prefix)
        rows += more
        s, more = self.classifier.summarize(s, prefix)
        rows += more
        return (s[0], s[3]), rows

    def summary(self, in_shape=None) -> "ModelSummary":
        _, rows = self.summarize(in_shape)
        return ModelSummary(rows)


@dataclass
class ModelSummary:
    rows: list[SummaryRow]

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)


def build_model(spec: ModelSpec | str = "default", seed: int = 0, width: float | None = None, dtype=np.float64) -> GhostNetV2:
    if not isinstance(spec, ModelSpec):
        spec = load_spec(spec)
    if width is not None:
        spec = spec.scaled(width)
    rng = np.random.default_rng(seed)
    return GhostNetV2(spec, rng=rng, dtype=dtype)


def forward(model: GhostNetV2, x: Tensor, mode: str = "eval") -> Tensor:
    return model(x, mode)
