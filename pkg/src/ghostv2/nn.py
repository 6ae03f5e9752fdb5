"""Parameter-holding layers built on the primitives in :mod:`ghostv2.ops`.

Layers expose two independent descriptions of themselves: ``forward`` (what
actually runs) and ``summarize`` (static shape/MAC/param arithmetic used by
model summaries). Tests hold the two against each other.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ParameterError
from .ops import ConvKernel
from .tensor import Tensor, name_scope


@dataclass
class SummaryRow:
    name: str
    kind: str
    out_shape: tuple
    macs: int
    params: int


class Layer:
    _local_name = ""

    def __setattr__(self, key, value):
        if isinstance(value, Layer):
            object.__setattr__(value, "_local_name", key)
        elif isinstance(value, list) and value and all(isinstance(v, Layer) for v in value):
            for i, v in enumerate(value):
                object.__setattr__(v, "_local_name", f"{key}.{i}")
        object.__setattr__(self, key, value)

    def __call__(self, x: Tensor, mode: str = "eval") -> Tensor:
        ctx = name_scope(self._local_name) if self._local_name else contextlib.nullcontext()
        with ctx:
            return self.forward(x, mode)

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        raise NotImplementedError

    def summarize(self, in_shape: tuple, prefix: str = "") -> tuple[tuple, list[SummaryRow]]:
        raise NotImplementedError

    def _items(self, prefix: str):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, np.ndarray):
                yield path, value
            elif isinstance(value, Layer):
                yield from value._items(path + ".")
            elif isinstance(value, list) and value and all(isinstance(v, Layer) for v in value):
                for i, v in enumerate(value):
                    yield from v._items(f"{path}.{i}.")

    def named_parameters(self, prefix: str = ""):
        return [(k, v) for k, v in self._items(prefix) if isinstance(v, Tensor)]

    def parameters(self) -> list[Tensor]:
        return [v for _, v in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        return [(k, v) for k, v in self._items(prefix) if isinstance(v, np.ndarray)]

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        """Every persistent array in traversal order (parameters and running stats)."""
        return [(k, v.data if isinstance(v, Tensor) else v) for k, v in self._items("")]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor.wrap(rng.uniform(-bound, bound, size=shape).astype(dtype))


class Conv(Layer):
    """Convolution with weight layout (kh, kw, c_in_per_group, c_out)."""

    def __init__(self, c_in, c_out, kernel=1, stride=1, groups=1, bias=False, *, rng, dtype=np.float64):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if c_in % groups or c_out % groups:
            raise ParameterError(f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
        self.stride = stride
        self.groups = groups
        fan_in = kh * kw * (c_in // groups)
        self.weight = uniform_init(rng, (kh, kw, c_in // groups, c_out), fan_in, dtype)
        self.bias = Tensor.wrap(np.zeros(c_out, dtype=dtype)) if bias else None

    @property
    def kernel(self) -> ConvKernel:
        return ConvKernel(self.weight, self.groups)

    def forward(self, x, mode="eval"):
        return ops.conv2d(x, self.kernel, self.bias, stride=self.stride, padding="same")

    def summarize(self, in_shape, prefix=""):
        n, h, w, c = in_shape
        kh, kw, cin_g, cout = self.weight.shape
        sh, sw = (self.stride, self.stride) if isinstance(self.stride, int) else self.stride
        ho = (h - 1) // sh + 1
        wo = (w - 1) // sw + 1
        out = (n, ho, wo, cout)
        params = self.weight.size + (self.bias.size if self.bias is not None else 0)
        macs = kh * kw * cin_g * cout * ho * wo * n
        return out, [SummaryRow(prefix + self._local_name, "conv", out, macs, params)]


class BatchNorm(Layer):
    def __init__(self, c, eps=1e-5, momentum=0.1, dtype=np.float64):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor.wrap(np.ones(c, dtype=dtype))
        self.beta = Tensor.wrap(np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def forward(self, x, mode="eval"):
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps, mode, self.momentum)

    def summarize(self, in_shape, prefix=""):
        return in_shape, [SummaryRow(prefix + self._local_name, "batch_norm", in_shape, 0, 2 * in_shape[3])]


class ConvBN(Layer):
    """conv -> batch norm -> optional ReLU"""

    def __init__(self, c_in, c_out, kernel=1, stride=1, groups=1, relu=True, *, rng, dtype=np.float64):
        self.conv = Conv(c_in, c_out, kernel, stride, groups, rng=rng, dtype=dtype)
        self.bn = BatchNorm(c_out, dtype=dtype)
        self.relu = relu

    def forward(self, x, mode="eval"):
        y = self.conv(x, mode)
        if self.bn is not None:
            y = self.bn(y, mode)
        return ops.relu(y) if self.relu else y

    def summarize(self, in_shape, prefix=""):
        p = prefix + self._local_name + "."
        s, rows = self.conv.summarize(in_shape, p)
        if self.bn is not None:
            s, more = self.bn.summarize(s, p)
            rows += more
        return s, rows


def summarize_sequence(layers, in_shape, prefix):
    rows = []
    shape = in_shape
    for layer in layers:
        shape, more = layer.summarize(shape, prefix)
        rows.extend(more)
    return shape, rows
