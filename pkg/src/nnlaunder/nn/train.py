from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..data import LabeledDataset
from ..errors import DivergenceError
from .model import Model, loss_and_grad


@dataclass
class OptimizerConfig:
    method: str = "adam"  # "adam" | "sgd"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.method not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainingTrace:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)


@dataclass
class Interleave:
    """Extra items mixed into every batch (``per_batch`` sampled each step)."""

    images: np.ndarray
    labels: np.ndarray
    per_batch: int


class Optimizer:
    def __init__(self, model: Model, cfg: OptimizerConfig):
        self.model = model
        self.cfg = cfg
        self.t = 0
        self.m = {(i, k): np.zeros_like(v) for i, k, v in model.parameters()}
        self.v = {(i, k): np.zeros_like(v) for i, k, v in model.parameters()}

    def step(self):
        cfg = self.cfg
        self.t += 1
        lr = cfg.learning_rate
        if cfg.method == "adam":
            b1, b2 = cfg.beta1, cfg.beta2
            lr_t = lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for i, name, p in self.model.parameters():
            g = self.model.layers[i].grads[name]
            if cfg.method == "sgd":
                p -= (lr * g).astype(p.dtype, copy=False)
                continue
            m, v = self.m[i, name], self.v[i, name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr_t * m / (np.sqrt(v) + cfg.epsilon)).astype(p.dtype, copy=False)
        self.model.enforce_frozen()


def _stream(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *keys]))


def train(
    model: Model,
    data: LabeledDataset,
    cfg: OptimizerConfig,
    interleave: Optional[Interleave] = None,
    on_epoch_end: Optional[Callable[[int, Model], None]] = None,
) -> TrainingTrace:
    """Mini-batch training with cross-entropy; updates ``model`` in place.

    Shuffling, dropout masks and interleave sampling each draw from their own
    seed stream keyed on (seed, epoch, batch), so a run is replayable.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    if data.labels.max() >= model.class_count:
        raise ValueError("labels exceed the model's class count")
    trace = TrainingTrace()
    if cfg.epochs == 0:
        return trace
    opt = Optimizer(model, cfg)
    model.enforce_frozen()
    n = len(data)
    for epoch in range(cfg.epochs):
        order = _stream(cfg.seed, epoch, 0).permutation(n)
        total_loss, correct, seen = 0.0, 0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x, y = data.images[idx], data.labels[idx]
            if interleave is not None and interleave.per_batch > 0:
                pick = _stream(cfg.seed, epoch, b, 2).integers(0, len(interleave.labels), interleave.per_batch)
                x = np.concatenate([x, interleave.images[pick]])
                y = np.concatenate([y, interleave.labels[pick]])
            loss, logits = loss_and_grad(model, x, y, training=True, rng=_stream(cfg.seed, epoch, b, 1))
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.step()
            total_loss += loss * len(y)
            correct += int((logits.argmax(axis=1) == y).sum())
            seen += len(y)
        trace.loss.append(total_loss / seen)
        trace.accuracy.append(correct / seen)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    return trace
