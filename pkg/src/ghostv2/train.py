"""Desk-scale training harness on a synthetic, class-conditional image set."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .backbone import GhostNetV2, ModelSpec, build_model, load_spec
from .errors import ConfigError, DivergenceError
from .tensor import Tape, Tensor, backward
from .weights import save_weights

PATTERNS = ("horizontal", "vertical", "checker", "diagonal")


@dataclass(frozen=True)
class SyntheticDataset:
    """Oriented sinusoidal gratings with random frequency, phase, color and noise.

    Every class draws pixel values from the same marginal distribution; only
    the spatial arrangement differs, so a model that sees one pixel at a time
    cannot separate the classes.
    """

    seed: int = 0
    image_size: int = 32
    num_classes: int = 4
    samples_per_class: int = 64
    test_per_class: int = 32
    noise: float = 0.3

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(PATTERNS):
            raise ConfigError(f"num_classes must be in [1, {len(PATTERNS)}], got {self.num_classes}")

    def _generate(self, rng: np.random.Generator, per_class: int):
        s = self.image_size
        yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
        images = np.empty((per_class * self.num_classes, s, s, 3))
        labels = np.repeat(np.arange(self.num_classes), per_class)
        for i, label in enumerate(labels):
            freq = rng.uniform(2.0, 4.0) * 2 * math.pi / s
            phase = rng.uniform(0, 2 * math.pi)
            kind = PATTERNS[label]
            if kind == "horizontal":
                base = np.sin(freq * yy + phase)
            elif kind == "vertical":
                base = np.sin(freq * xx + phase)
            elif kind == "checker":
                base = np.sin(freq * yy + phase) * np.sin(freq * xx + rng.uniform(0, 2 * math.pi)) * 2.0
            else:
                base = np.sin(freq * (xx + yy) / math.sqrt(2) + phase)
            color = rng.uniform(0.5, 1.0, size=3) * rng.choice([-1.0, 1.0])
            images[i] = base[..., None] * color + self.noise * rng.standard_normal((s, s, 3))
        return images, labels

    def split(self):
        """((train_x, train_y), (test_x, test_y)) as float64 arrays and int labels."""
        rng = np.random.default_rng(self.seed)
        train = self._generate(rng, self.samples_per_class)
        test = self._generate(rng, self.test_per_class)
        return train, test


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    image_size: int = 32
    num_classes: int = 4
    samples_per_class: int = 64
    model_spec: str = "mini"
    placement: str = "expanded"
    width: float = 1.0

    def validate(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        return self


@dataclass
class TrainLog:
    config: dict
    losses: list[float] = field(default_factory=list)
    train_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    weights_path: str | None = None

    def to_dict(self):
        return asdict(self)


class SGD:
    """Heavy-ball SGD: v <- momentum * v + g; p <- p - lr * v."""

    def __init__(self, params, lr, momentum=0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, grads):
        for p, v in zip(self.params, self.velocity):
            g = grads.array(p)
            v *= self.momentum
            v += g
            p.data -= self.lr * v


def evaluate(model: GhostNetV2, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    correct = 0
    for start in range(0, len(labels), batch_size):
        x = Tensor.wrap(images[start : start + batch_size].astype(model.dtype))
        logits = model(x, "eval").data
        correct += int((logits.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return correct / len(labels)


def make_model(cfg: TrainConfig) -> GhostNetV2:
    spec = cfg.model_spec if isinstance(cfg.model_spec, ModelSpec) else load_spec(cfg.model_spec)
    spec = spec.with_placement(cfg.placement).scaled(cfg.width)
    if spec.num_classes != cfg.num_classes or spec.input_size != cfg.image_size:
        spec = replace(spec, num_classes=cfg.num_classes, input_size=cfg.image_size)
    return build_model(spec, seed=cfg.seed)


def train_toy(cfg: TrainConfig, weights_path=None, model: GhostNetV2 | None = None) -> tuple[TrainLog, GhostNetV2]:
    cfg.validate()
    data = SyntheticDataset(cfg.seed, cfg.image_size, cfg.num_classes, cfg.samples_per_class)
    (train_x, train_y), (test_x, test_y) = data.split()
    if model is None:
        model = make_model(cfg)
    params = model.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed + 1)
    log = TrainLog(config=asdict(cfg))

    order = np.empty(0, dtype=np.int64)
    for step in range(1, cfg.steps + 1):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(train_y))])
        idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
        x = Tensor.wrap(train_x[idx].astype(model.dtype))
        with Tape() as tape:
            logits = model(x, "train")
            loss = ops.softmax_cross_entropy(logits, train_y[idx])
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        log.losses.append(value)
        opt.step(backward(tape, loss))

    log.train_accuracy = evaluate(model, train_x, train_y)
    log.test_accuracy = evaluate(model, test_x, test_y)
    if weights_path is not None:
        save_weights(model, weights_path)
        log.weights_path = str(Path(weights_path))
    return log, model
