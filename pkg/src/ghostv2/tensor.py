"""Dense NHWC tensors, the recording tape, and multiply-accumulate counters.

Every primitive in :mod:`ghostv2.ops` produces its output through
:func:`record`, which appends a node to each active :class:`Tape` and lets the
caller attach a vector-Jacobian product. :func:`backward` replays a tape in
reverse recording order, which is a valid reverse topological order because a
node can only consume tensors that existed when it was recorded.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError, UsageError

_DTYPES = (np.float32, np.float64)


class Tensor:
    """Immutable-by-convention wrapper around a float ndarray.

    Spatial tensors are 4-D and laid out as (N, H, W, C). Kernels reuse the
    class with layout (kh, kw, c_in_per_group, c_out); logits are 2-D and
    losses are 0-D.
    """

    __slots__ = ("data", "name")

    def __init__(self, data, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype, copy=True)
        if dtype is None and arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64)
        if arr.dtype not in _DTYPES:
            raise ShapeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dims must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.name = name

    @classmethod
    def wrap(cls, arr: np.ndarray, name: str | None = None) -> "Tensor":
        # no copy and no validation; ops use this for their outputs
        t = cls.__new__(cls)
        t.data = arr
        t.name = name
        return t

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "Tensor":
        return cls.wrap(np.zeros(shape, dtype=dtype))

    @classmethod
    def ones(cls, shape, dtype=np.float64) -> "Tensor":
        return cls.wrap(np.ones(shape, dtype=dtype))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def require_nhwc(x: Tensor, what: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (N, H, W, C), got shape {x.shape}")


# ---------------------------------------------------------------------------
# name scopes


_scope: contextvars.ContextVar[tuple[str, ...]] = contextvars.ContextVar("ghostv2_scope", default=())


@contextlib.contextmanager
def name_scope(name: str):
    token = _scope.set(_scope.get() + (name,))
    try:
        yield
    finally:
        _scope.reset(token)


def current_scope() -> str:
    return ".".join(_scope.get())


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    attrs: dict[str, Any] = field(default_factory=dict)
    scope: str = ""


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; every op executed inside the block is recorded.
    A tape has a single owner and must not be shared between threads.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _tapes.set(_tapes.get() + (self,))
        return self

    def __exit__(self, *exc):
        _tapes.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> "GradMap":
        return backward(self, loss)


_tapes: contextvars.ContextVar[tuple[Tape, ...]] = contextvars.ContextVar("ghostv2_tapes", default=())


def record(op: str, inputs: Iterable[Tensor], out: np.ndarray, vjp=None, **attrs) -> Tensor:
    """Wrap ``out`` as a Tensor and append a node to every active tape."""
    result = Tensor.wrap(out)
    tapes = _tapes.get()
    if tapes:
        node = Node(op, tuple(inputs), result, vjp, attrs, current_scope())
        for tape in tapes:
            tape.nodes.append(node)
    return result


class GradMap:
    """Gradients keyed by tensor identity.

    Looking up a tensor that was recorded but does not influence the loss
    yields zeros; looking up an unrecorded tensor raises ``KeyError``.
    """

    def __init__(self, grads: dict[int, np.ndarray], known: dict[int, Tensor]):
        self._grads = grads
        self._known = known

    def __getitem__(self, t: Tensor) -> Tensor:
        key = id(t)
        if key in self._grads:
            return Tensor.wrap(self._grads[key])
        if key in self._known:
            return Tensor.wrap(np.zeros_like(t.data))
        raise KeyError(f"{t!r} was not recorded on this tape")

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._known

    def array(self, t: Tensor) -> np.ndarray:
        return self[t].data

    def __len__(self):
        return len(self._grads)


def backward(tape: Tape, loss: Tensor) -> GradMap:
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar seed, got shape {loss.shape}")
    known: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            known[id(t)] = t
        known[id(node.output)] = node.output
    if id(loss) not in known:
        raise UsageError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None or node.vjp is None:
            continue
        in_grads = node.vjp(g)
        if len(in_grads) != len(node.inputs):
            raise UsageError(f"vjp of {node.op} returned {len(in_grads)} grads for {len(node.inputs)} inputs")
        for t, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"vjp of {node.op} produced grad {gi.shape} for input {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return GradMap(grads, known)


# ---------------------------------------------------------------------------
# multiply-accumulate counting


class MacCounter:
    """Accumulates MACs reported by instrumented kernels.

    ``macs`` is the headline total (convolutions and FC-style attention).
    Elementwise, normalization, pooling and resize work is tallied in
    ``elementwise`` and never mixed into ``macs``.
    """

    def __init__(self):
        self.macs = 0
        self.elementwise = 0
        self.by_kind: dict[str, int] = defaultdict(int)
        self.by_scope: dict[str, int] = defaultdict(int)
        self.elementwise_by_kind: dict[str, int] = defaultdict(int)

    def add(self, kind: str, macs: int = 0, elementwise: int = 0) -> None:
        scope = current_scope()
        if macs:
            self.macs += macs
            self.by_kind[kind] += macs
            self.by_scope[scope] += macs
        if elementwise:
            self.elementwise += elementwise
            self.elementwise_by_kind[kind] += elementwise

    def scope_total(self, fragment: str) -> int:
        """MACs of every scope whose dotted path contains ``fragment`` as whole components."""
        needle = "." + fragment + "."
        return sum(v for k, v in self.by_scope.items() if needle in "." + k + ".")


_counters: contextvars.ContextVar[tuple[MacCounter, ...]] = contextvars.ContextVar("ghostv2_counters", default=())


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    token = _counters.set(_counters.get() + (counter,))
    try:
        yield counter
    finally:
        _counters.reset(token)


def tally(kind: str, macs: int = 0, elementwise: int = 0) -> None:
    for c in _counters.get():
        c.add(kind, int(macs), int(elementwise))
