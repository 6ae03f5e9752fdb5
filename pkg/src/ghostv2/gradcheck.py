"""Central finite-difference checking of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class GradCheckReport:
    max_rel_error: float
    failing_index: tuple | None
    tol: float
    checked: int
    worst: dict = field(default_factory=dict)
    kinks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.failing_index is None

    def __str__(self):
        status = "ok" if self.passed else f"FAIL at {self.failing_index}"
        kinks = f", {len(self.kinks)} kink crossing(s)" if self.kinks else ""
        return f"max rel err {self.max_rel_error:.3e} over {self.checked} entries{kinks} ({status})"


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = DEFAULT_EPS,
    tol: float = DEFAULT_TOL,
    max_checks: int | None = None,
    seed: int = 0,
    allow_kinks: bool = True,
) -> GradCheckReport:
    """Compare tape gradients of a scalar ``fn(*inputs)`` with central differences.

    Entries are perturbed in place and restored, so ``fn`` may also close over
    the inputs (parameters of a layer, for instance). ``max_checks`` caps the
    entries probed per input; they are drawn deterministically from ``seed``.
    The failing index is ``(input_position, *element_index)``.

    Piecewise-linear ops (ReLU, clamps, max pooling) can switch branches
    inside the +/-eps window, which corrupts the central difference. With
    ``allow_kinks`` such an entry is accepted only when exactly one one-sided
    difference agrees with the analytic value within ``tol``; it is then
    listed in ``kinks`` rather than counted as a failure.
    """
    single = isinstance(inputs, Tensor)
    xs = [inputs] if single else list(inputs)

    with Tape() as tape:
        loss = fn(*xs)
    grads = backward(tape, loss)
    analytic = [grads.array(x) if x in grads else np.zeros_like(x.data) for x in xs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_info: dict = {}
    failing = None
    checked = 0
    kinks: list = []
    for pos, x in enumerate(xs):
        flat = x.data.reshape(-1)
        if not np.shares_memory(flat, x.data):
            raise ValueError("grad_check needs contiguous input storage")
        indices = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            indices = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn(*xs).data)
            flat[i] = orig - eps
            f_minus = float(fn(*xs).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic[pos].reshape(-1)[i])
            err = float(relative_error(a, numeric))
            checked += 1
            idx = (pos,) + tuple(int(v) for v in np.unravel_index(i, x.shape))
            if err >= tol and allow_kinks:
                f0 = float(fn(*xs).data)
                sides = [(f_plus - f0) / eps, (f0 - f_minus) / eps]
                ok = [float(relative_error(a, d)) < tol for d in sides]
                if ok[0] != ok[1]:
                    kinks.append({"index": idx, "analytic": a, "forward": sides[0], "backward": sides[1]})
                    continue
            if err > worst:
                worst = err
                worst_info = {"index": idx, "analytic": a, "numeric": numeric}
            if err >= tol and failing is None:
                failing = idx
    return GradCheckReport(worst, failing, tol, checked, worst_info, kinks)
