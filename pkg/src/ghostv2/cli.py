"""``ghostv2`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .attention import DfcConfig, dfc_attention_conv
from .backbone import build_model, load_spec
from .blocks import PLACEMENTS, BottleneckConfig, GhostBottleneck, GhostModule
from .errors import GhostError, UsageError
from .ops import ConvKernel

RF_LAYERS = ("dfc", "ghost-intrinsic", "ghost-cheap", "bottleneck")


class Output:
    """Collects a command's report and renders it as text or JSON."""

    def __init__(self, args):
        self.args = args
        self.machine = args.format == "machine"
        self.lines: list[str] = []
        self.data: dict = {"command": args.command}
        threads, source = analysis.resolve_threads(args.threads)
        self.data["threads"] = {"count": threads, "source": source}
        if not self.machine:
            self.lines.append(f"# threads: {threads if threads else 'library default'} ({source})")

    def text(self, line: str = ""):
        self.lines.append(line)

    def emit(self, path=None):
        body = analysis.dumps(self.data) if self.machine else "\n".join(self.lines)
        print(body)
        if path is not None:
            Path(path).write_text(body + "\n")


def _spec(args):
    spec = load_spec(args.config or "default")
    if args.width is not None:
        spec = spec.scaled(args.width)
    if getattr(args, "placement", None):
        spec = spec.with_placement(args.placement)
    return spec


def cmd_summary(args, out: Output):
    model = build_model(_spec(args), seed=args.seed)
    summary = model.summary()
    rows = [{"name": r.name, "kind": r.kind, "out_shape": "x".join(map(str, r.out_shape[1:])), "macs": r.macs, "params": r.params} for r in summary.rows]
    out.data.update(model=model.spec.name, width=model.spec.width_multiplier, rows=rows, total_macs=summary.total_macs, total_params=summary.total_params)
    out.text(analysis.format_table(rows, ["name", "kind", "out_shape", "macs", "params"]))
    out.text(f"total: {summary.total_macs / 1e6:.2f}M MACs, {summary.total_params / 1e6:.3f}M params")
    out.emit(args.out)


def cmd_flops(args, out: Output):
    spec = _spec(args)
    model = build_model(spec, seed=args.seed, dtype=np.float32)
    size = args.size or spec.input_size
    report = analysis.count_flops(model, (1, size, size, spec.in_channels))
    out.data.update(model=spec.name, width=spec.width_multiplier, **report.to_dict())
    out.data["by_block"] = report.grouped(2)
    out.data["by_kind"] = report.by_kind()
    groups = [{"group": k, **v} for k, v in report.grouped(2).items()]
    out.text(f"{spec.name} width {spec.width_multiplier} at {size}x{size}")
    out.text(analysis.format_table(groups, ["group", "macs", "params", "elementwise"]))
    out.text(f"total: {report.total_macs} MACs ({report.total_macs / 1e6:.2f}M), {report.total_params} params ({report.total_params / 1e6:.3f}M)")
    out.text(f"elementwise ops (not in the MAC total): {report.total_elementwise}")
    out.emit(args.out)


def cmd_bench(args, out: Output):
    if args.target == "model":
        spec = _spec(args)
        target = build_model(spec, seed=args.seed, dtype=np.float32)
        size = args.size or spec.input_size
        shape = (args.batch, size, size, spec.in_channels)
    else:
        c = args.channels
        size = args.size or 56
        cfg = BottleneckConfig(c, 2 * c, c, 1, args.placement or "expanded", DfcConfig(kernel_h=args.kh, kernel_w=args.kw))
        target = GhostBottleneck(cfg, rng=np.random.default_rng(args.seed), dtype=np.float32)
        shape = (args.batch, size, size, c)
    report = analysis.bench(target, shape, iters=args.iters, warmup=args.warmup, threads=args.threads, seed=args.seed)
    rep = report.to_dict()
    del rep["threads"], rep["threads_source"]  # already recorded under "threads"
    out.data.update(target=args.target, **rep)
    out.text(f"{args.target} input {shape} {report.dtype}, {report.iters} iters after {report.warmup} warmup")
    out.text(f"min {report.min_s * 1e3:.3f} ms  median {report.median_s * 1e3:.3f} ms  p95 {report.p95_s * 1e3:.3f} ms")
    out.text(f"{report.macs} MACs/forward, {report.macs_per_s / 1e9:.3f} GMAC/s at the median")
    out.emit(args.out)


def rf_target(layer: str, size: int, channels: int, kh: int, kw: int, placement: str, seed: int):
    """(fn, input shape, output channel) for one of the probe-able layers."""
    rng = np.random.default_rng(seed)
    shape = (1, size, size, channels)
    if layer == "dfc":
        kv = ConvKernel.depthwise(rng.standard_normal((kh, 1, 1, channels)))
        khz = ConvKernel.depthwise(rng.standard_normal((1, kw, 1, channels)))
        return (lambda z: dfc_attention_conv(z, kv, khz)), shape, 0
    if layer in ("ghost-intrinsic", "ghost-cheap"):
        mod = GhostModule(channels, 2 * channels, relu=False, rng=rng)
        return mod, shape, 0 if layer == "ghost-intrinsic" else channels
    if layer == "bottleneck":
        cfg = BottleneckConfig(channels, 2 * channels, channels, 1, placement, DfcConfig(kernel_h=kh, kernel_w=kw))
        return GhostBottleneck(cfg, rng=rng), shape, 0
    raise UsageError(f"unknown layer {layer!r}; choose from {', '.join(RF_LAYERS)}")


def cmd_rf_probe(args, out: Output):
    fn, shape, channel = rf_target(args.layer, args.size, args.channels, args.kh, args.kw, args.placement or "expanded", args.seed)
    pos = (args.size // 2, args.size // 2) if args.pos is None else tuple(args.pos)
    mask = analysis.receptive_field_probe(fn, shape, pos, channel, seed=args.seed, samples=args.samples)
    path = args.out or "rf_mask.pgm"
    mask.to_pgm(path)
    out.data.update(layer=args.layer, position=list(pos), channel=channel, extent=list(mask.extent), cells=int(mask.mask.sum()), mask=mask.mask.astype(int).tolist(), image=str(path))
    out.text(f"{args.layer}: output {pos} channel {channel}, input {shape}")
    for row in mask.mask:
        out.text("".join("#" if v else "." for v in row))
    out.text(f"extent {mask.extent[0]}x{mask.extent[1]}, {int(mask.mask.sum())} cells; image written to {path}")
    out.emit()


def cmd_gradcheck(args, out: Output):
    from .gradsuite import all_cases, primitive_cases, run_suite

    cases = all_cases() if args.all else primitive_cases()
    if args.only:
        cases = [c for c in cases if c.name in args.only]
        if not cases:
            raise UsageError(f"no gradcheck case named {', '.join(args.only)}")
    results = run_suite(cases, seed=args.seed, eps=args.eps, tol=args.tol)
    rows = [
        {
            "case": r.name,
            "shape": "x".join(map(str, r.shape)),
            "max_rel_error": f"{r.report.max_rel_error:.2e}",
            "checked": r.report.checked,
            "kinks": len(r.report.kinks),
            "status": "pass" if r.passed else f"FAIL {r.report.failing_index}",
        }
        for r in results
    ]
    failed = [r for r in results if not r.passed]
    out.data.update(eps=args.eps, tol=args.tol, results=rows, failed=len(failed), passed=not failed)
    out.text(analysis.format_table(rows, ["case", "shape", "max_rel_error", "checked", "kinks", "status"]))
    out.text(f"{len(results) - len(failed)}/{len(results)} checks passed (eps {args.eps}, tol {args.tol})")
    out.emit(args.out)
    return 1 if failed else 0


def cmd_train_toy(args, out: Output):
    from .train import TrainConfig, train_toy

    cfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        model_spec=args.config or "mini",
        placement=args.placement or "expanded",
        width=args.width or 1.0,
    )
    log, _ = train_toy(cfg, weights_path=args.out)
    out.data.update(log.to_dict())
    every = max(1, len(log.losses) // 10)
    for i in range(0, len(log.losses), every):
        out.text(f"step {i + 1:5d}  loss {log.losses[i]:.6f}")
    out.text(f"step {len(log.losses):5d}  loss {log.losses[-1]:.6f}")
    out.text(f"train accuracy {log.train_accuracy:.4f}, test accuracy {log.test_accuracy:.4f}")
    if log.weights_path:
        out.text(f"weights saved to {log.weights_path}")
    out.emit()


def cmd_compare_attn(args, out: Output):
    rows = analysis.compare_attention_costs(args.h, args.w, args.c, args.kh, args.kw, args.factor, measure=args.measure)
    out.data.update(h=args.h, w=args.w, c=args.c, kh=args.kh, kw=args.kw, factor=args.factor, measured=args.measure, rows=rows)
    shown = [dict(r, vs_full=f"{r['vs_full']:.6g}", vs_conv=f"{r['vs_conv']:.6g}") for r in rows]
    out.text(analysis.format_table(shown, ["variant", "grid", "macs", "vs_full", "vs_conv"]))
    out.emit(args.out)


COMMANDS = {
    "summary": cmd_summary,
    "flops": cmd_flops,
    "bench": cmd_bench,
    "rf-probe": cmd_rf_probe,
    "gradcheck": cmd_gradcheck,
    "train-toy": cmd_train_toy,
    "compare-attn": cmd_compare_attn,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="spec file or bundled name: default, mini (train-toy uses mini)")
    common.add_argument("--width", type=float, default=None, help="width multiplier")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="worker threads (GHOSTV2_THREADS overrides)")
    common.add_argument("--format", choices=("text", "machine"), default="text")
    common.add_argument("--out", default=None, help="output file (report, weights or image)")

    parser = argparse.ArgumentParser(prog="ghostv2", description="Ghost modules, DFC attention and GhostNetV2 accounting.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("summary", parents=[common], help="per-layer table of shapes, MACs and params")
    p = sub.add_parser("flops", parents=[common], help="graph-walk MAC and param accounting")
    p.add_argument("--size", type=int, default=None, help="input side (default from the model config)")

    p = sub.add_parser("bench", parents=[common], help="wall-clock micro-benchmark")
    p.add_argument("--target", choices=("model", "bottleneck"), default="model")
    p.add_argument("--placement", choices=PLACEMENTS, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--kh", type=int, default=5)
    p.add_argument("--kw", type=int, default=5)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)

    p = sub.add_parser("rf-probe", parents=[common], help="Jacobian receptive-field mask, written as a PGM image")
    p.add_argument("--layer", choices=RF_LAYERS, default="dfc")
    p.add_argument("--kh", type=int, default=5)
    p.add_argument("--kw", type=int, default=5)
    p.add_argument("--size", type=int, default=9)
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--pos", type=int, nargs=2, default=None, metavar=("ROW", "COL"))
    p.add_argument("--samples", type=int, default=8, help="random inputs whose masks are united")
    p.add_argument("--placement", choices=PLACEMENTS, default=None)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--all", action="store_true", help="include DFC, Ghost and bottleneck composites")
    p.add_argument("--only", nargs="+", default=None, metavar="CASE")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("train-toy", parents=[common], help="train the mini model on the synthetic set")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--placement", choices=PLACEMENTS, default=None)

    p = sub.add_parser("compare-attn", parents=[common], help="MACs of full, decoupled and conv attention")
    p.add_argument("--h", type=int, default=56)
    p.add_argument("--w", type=int, default=56)
    p.add_argument("--c", type=int, default=1)
    p.add_argument("--kh", type=int, default=9)
    p.add_argument("--kw", type=int, default=9)
    p.add_argument("--factor", type=int, default=2)
    p.add_argument("--measure", action="store_true", help="count with the instrumented kernels")
    return parser


def _report_error(args, exc: BaseException) -> None:
    kind = type(exc).__name__
    if getattr(args, "format", "text") == "machine":
        print(json.dumps({"error": {"type": kind, "message": str(exc)}}), file=sys.stderr)
    else:
        print(f"ghostv2: error: {kind}: {exc}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        out = Output(args)
        threads, _ = analysis.resolve_threads(args.threads)
        with analysis.thread_limit(threads):
            code = COMMANDS[args.command](args, out)
        return code or 0
    except (GhostError, ValueError, FileNotFoundError, IsADirectoryError) as exc:
        _report_error(args, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
