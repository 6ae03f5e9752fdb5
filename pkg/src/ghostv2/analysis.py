"""Cost accounting, receptive-field probes and host micro-benchmarks.

:func:`count_flops` walks the primitive graph recorded on a tape during one
forward pass and prices every node from its recorded shapes. It shares no code
with the layers' static ``summarize`` methods or with the live counters that
the kernels feed, so the three can be checked against each other.
"""

from __future__ import annotations

import contextlib
import json
import os
import statistics
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import ops
from .attention import (
    DecoupledWeights,
    FullAttentionWeights,
    attention_costs,
    dfc_attention_conv,
    dfc_attention_general,
    full_fc_attention,
    pooled_extent,
)
from .errors import ParameterError
from .nn import Layer
from .ops import ConvKernel
from .tensor import Tape, Tensor, backward, count_macs

THREADS_ENV = "GHOSTV2_THREADS"


# ---------------------------------------------------------------------------
# FLOPs


@dataclass
class FlopsRow:
    name: str
    kind: str
    out_shape: tuple
    macs: int
    params: int
    elementwise: int = 0


@dataclass
class FlopsReport:
    rows: list[FlopsRow]
    input_shape: tuple = ()

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_elementwise(self) -> int:
        return sum(r.elementwise for r in self.rows)

    def by_kind(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for r in self.rows:
            if r.macs:
                out[r.kind] += r.macs
        return dict(out)

    def grouped(self, depth: int = 2) -> dict[str, dict[str, int]]:
        """Totals keyed by the first ``depth`` components of the row names."""
        out: dict[str, dict[str, int]] = {}
        for r in self.rows:
            key = ".".join(r.name.split(".")[:depth]) or "<root>"
            g = out.setdefault(key, {"macs": 0, "params": 0, "elementwise": 0})
            g["macs"] += r.macs
            g["params"] += r.params
            g["elementwise"] += r.elementwise
        return out

    def scope_macs(self, fragment: str) -> int:
        needle = "." + fragment + "."
        return sum(r.macs for r in self.rows if needle in "." + r.name + ".")

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "total_macs": self.total_macs,
            "total_params": self.total_params,
            "total_elementwise": self.total_elementwise,
            "rows": [asdict(r) | {"out_shape": list(r.out_shape)} for r in self.rows],
        }


_CONV_KINDS = {"conv", "conv_pointwise", "conv_depthwise"}


def _price(node) -> tuple[int, int]:
    """(MACs, elementwise ops) of one recorded node, from shapes alone."""
    op = node.op
    out = node.output.shape
    if op in _CONV_KINDS:
        kh, kw, cin_g, cout = node.inputs[1].shape
        n, ho, wo, _ = out
        ew = n * ho * wo * cout if len(node.inputs) == 3 else 0
        return kh * kw * cin_g * cout * ho * wo * n, ew
    if op == "attention_full":
        n, h, w, c = node.inputs[0].shape
        return n * (h * w) ** 2 * c, 0
    if op == "attention_decoupled":
        n, h, w, c = node.inputs[0].shape
        return n * h * w * (h + w) * c, 0
    if op == "pool":
        wh, ww = node.attrs["window"]
        return 0, int(np.prod(out)) * wh * ww
    if op == "resize":
        taps = 4 if node.attrs["kind"] == "bilinear" else 16
        return 0, int(np.prod(out)) * taps
    if op in ("batch_norm", "relu", "sigmoid", "hard_sigmoid", "clip", "add", "mul", "scale_channels"):
        return 0, int(np.prod(out))
    if op == "global_avg_pool":
        return 0, int(np.prod(node.inputs[0].shape))
    return 0, 0


def count_flops(target, input_shape=None, dtype=np.float32) -> FlopsReport:
    """Price one forward pass of ``target`` (a model, layer or callable).

    Params are counted once per distinct parameter tensor consumed by the
    graph; running statistics are not parameters.
    """
    if input_shape is None:
        spec = getattr(target, "spec", None)
        if spec is None:
            raise ParameterError("input_shape is required for targets without a spec")
        input_shape = (1, spec.input_size, spec.input_size, spec.in_channels)
    params = target.parameters() if isinstance(target, Layer) else []
    if params:
        dtype = params[0].dtype
    x = Tensor.wrap(np.zeros(input_shape, dtype=dtype))
    param_ids = {id(p) for p in params}
    with Tape() as tape:
        if isinstance(target, Layer):
            target(x, "eval")
        else:
            target(x)

    seen: set[int] = set()
    rows = []
    for node in tape.nodes:
        macs, ew = _price(node)
        params = 0
        for t in node.inputs[1:]:
            if id(t) in param_ids and id(t) not in seen:
                seen.add(id(t))
                params += t.size
        if macs or params or ew:
            rows.append(FlopsRow(node.scope, node.op, tuple(node.output.shape), macs, params, ew))
    return FlopsReport(rows, tuple(input_shape))


def default_kernel(size: int) -> int:
    """DFC kernel extent the default model config assigns to a feature map of this size."""
    return 9 if size >= 28 else 7 if size >= 14 else 5


def compare_attention_costs(h: int, w: int, c: int = 1, k_h: int = 9, k_w: int = 9, factor: int = 2, measure: bool = False) -> list[dict]:
    """MAC table for full, decoupled and convolutional attention at one grid size.

    With ``measure`` the numbers come from running the instrumented kernels on
    zero tensors instead of the closed forms (practical up to about 64x64).
    """
    if min(h, w, c, k_h, k_w, factor) < 1:
        raise ParameterError("all sizes must be positive")
    hd, wd = pooled_extent(h, factor), pooled_extent(w, factor)
    if measure:
        full = _measure_full(h, w, c)
        dec = _measure_decoupled(h, w, c)
        conv = _measure_conv(h, w, c, k_h, k_w)
        conv_ds = _measure_conv(hd, wd, c, k_h, k_w)
    else:
        costs = attention_costs(h, w, c, k_h, k_w)
        full, dec, conv = costs["full"], costs["decoupled"], costs["conv"]
        conv_ds = attention_costs(hd, wd, c, k_h, k_w)["conv"]
    rows = [
        ("full", full, f"{h}x{w}"),
        ("decoupled", dec, f"{h}x{w}"),
        ("conv", conv, f"{h}x{w}"),
        (f"conv/{factor}", conv_ds, f"{hd}x{wd}"),
    ]
    return [{"variant": name, "grid": grid, "macs": macs, "vs_full": macs / full, "vs_conv": macs / conv} for name, macs, grid in rows]


def _measure_full(h, w, c):
    z = Tensor.zeros((1, h, w, c))
    f = FullAttentionWeights(Tensor.zeros((h, w, h, w, c)))
    with count_macs() as cnt:
        full_fc_attention(z, f)
    return cnt.macs


def _measure_decoupled(h, w, c):
    z = Tensor.zeros((1, h, w, c))
    wts = DecoupledWeights(Tensor.zeros((h, h, w, c)), Tensor.zeros((w, w, h, c)))
    with count_macs() as cnt:
        dfc_attention_general(z, wts)
    return cnt.macs


def _measure_conv(h, w, c, k_h, k_w):
    z = Tensor.zeros((1, h, w, c))
    kv = ConvKernel.depthwise(np.zeros((k_h, 1, 1, c)))
    kh = ConvKernel.depthwise(np.zeros((1, k_w, 1, c)))
    with count_macs() as cnt:
        dfc_attention_conv(z, kv, kh)
    return cnt.macs


# ---------------------------------------------------------------------------
# receptive fields


@dataclass
class RfMask:
    mask: np.ndarray  # (H, W) bool
    position: tuple[int, int]
    channel: int
    threshold: float = 0.0
    samples: int = 1

    @property
    def extent(self) -> tuple[int, int]:
        """Height and width of the bounding box of the marked cells."""
        rows = np.flatnonzero(self.mask.any(axis=1))
        cols = np.flatnonzero(self.mask.any(axis=0))
        if rows.size == 0:
            return 0, 0
        return int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)

    def to_pgm(self, path, scale: int = 8) -> None:
        write_pgm(self.mask, path, scale)


def jacobian_row(fn: Callable[[Tensor], Tensor], x: Tensor, out_pos, out_channel) -> np.ndarray:
    """d fn(x)[0, h, w, c] / d x, extracted with one backward pass."""
    with Tape() as tape:
        y = fn(x)
    _check_position(y.shape, out_pos, out_channel)
    seed = np.zeros(y.shape, dtype=y.dtype)
    seed[0, out_pos[0], out_pos[1], out_channel] = 1.0
    with tape:
        loss = ops.weighted_sum(y, seed)
    return backward(tape, loss).array(x)


def _check_position(shape, pos, channel):
    _, h, w, c = shape
    if not (0 <= pos[0] < h and 0 <= pos[1] < w and 0 <= channel < c):
        raise ParameterError(f"probe position {tuple(pos)} / channel {channel} outside output extent {shape}")


def _probe_inputs(input_shape, seed, samples):
    rng = np.random.default_rng(seed)
    return [Tensor.wrap(rng.standard_normal(input_shape)) for _ in range(samples)]


def receptive_field_probe(fn, input_shape, out_pos, out_channel, seed: int = 0, samples: int = 1) -> RfMask:
    """Input cells whose Jacobian entry for one output is structurally nonzero.

    The mask is the union over ``samples`` random f64 inputs, which recovers
    the full support of blocks whose ReLUs switch paths off for a given input.
    """
    if callable(fn) and isinstance(fn, Layer):
        layer = fn
        fn = lambda t: layer(t, "eval")  # noqa: E731
    mask = np.zeros(input_shape[1:3], dtype=bool)
    for x in _probe_inputs(input_shape, seed, samples):
        jac = jacobian_row(fn, x, out_pos, out_channel)
        mask |= np.any(jac[0] != 0.0, axis=-1)
    return RfMask(mask, tuple(out_pos), out_channel, 0.0, samples)


def receptive_field_fd(fn, input_shape, out_pos, out_channel, seed: int = 0, samples: int = 1, eps: float = 1e-3) -> np.ndarray:
    """Finite-difference counterpart of :func:`receptive_field_probe` on the same inputs."""
    if isinstance(fn, Layer):
        layer = fn
        fn = lambda t: layer(t, "eval")  # noqa: E731
    h, w = input_shape[1:3]
    mask = np.zeros((h, w), dtype=bool)
    for x in _probe_inputs(input_shape, seed, samples):
        base = x.data
        _check_position(fn(x).shape, out_pos, out_channel)
        for i in range(h):
            for j in range(w):
                for c in range(input_shape[3]):
                    plus = base.copy()
                    plus[0, i, j, c] += eps
                    minus = base.copy()
                    minus[0, i, j, c] -= eps
                    yp = fn(Tensor.wrap(plus)).data[0, out_pos[0], out_pos[1], out_channel]
                    ym = fn(Tensor.wrap(minus)).data[0, out_pos[0], out_pos[1], out_channel]
                    if yp != ym:
                        mask[i, j] = True
                        break
    return mask


def write_pgm(mask: np.ndarray, path, scale: int = 8) -> None:
    """Binary (P5) graymap: marked cells white, the rest black."""
    img = np.where(mask, 255, 0).astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# benchmarks


@dataclass
class BenchReport:
    min_s: float
    median_s: float
    p95_s: float
    macs: int
    macs_per_s: float
    threads: int | None
    threads_source: str
    dtype: str
    input_shape: tuple
    iters: int
    warmup: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


def resolve_threads(threads: int | None) -> tuple[int | None, str]:
    env = os.environ.get(THREADS_ENV)
    if env:
        return int(env), f"env:{THREADS_ENV}"
    if threads is not None:
        return threads, "flag"
    return None, "default"


def thread_limit(threads: int | None):
    return threadpool_limits(limits=threads) if threads else contextlib.nullcontext()


def bench(target, input_shape, iters: int = 10, warmup: int = 2, threads: int | None = None, dtype=np.float32, seed: int = 0) -> BenchReport:
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    n_threads, source = resolve_threads(threads)
    rng = np.random.default_rng(seed)
    x = Tensor.wrap(rng.standard_normal(input_shape).astype(dtype))
    run = (lambda: target(x, "eval")) if isinstance(target, Layer) else (lambda: target(x))
    with count_macs() as cnt:
        run()
    times = []
    with thread_limit(n_threads):
        for _ in range(warmup):
            run()
        for _ in range(iters):
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)
    med = statistics.median(times)
    p95 = float(np.percentile(times, 95))
    return BenchReport(min(times), med, p95, cnt.macs, cnt.macs / med if med > 0 else float("inf"), n_threads, source, np.dtype(dtype).name, tuple(input_shape), iters, warmup)


def format_table(rows: list[dict], columns: list[str]) -> str:
    cells = [[str(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(columns, widths))]
    lines.append("  ".join("-" * wd for wd in widths))
    lines.extend("  ".join(v.ljust(wd) for v, wd in zip(row, widths)) for row in cells)
    return "\n".join(lines)


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=str)
