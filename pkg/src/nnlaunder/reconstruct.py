"""Trigger reverse-engineering and per-class anomaly ranking.

For each candidate target class the smallest mask/pattern pair that flips
clean inputs to that class is found by gradient descent on

    CE(target, f((1 - m) * x + m * pattern)) + lambda * sum(m)

with ``m`` and ``pattern`` squashed through tanh so they stay in [0, 1].
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset, read_idx_tensor, write_idx_tensor
from .errors import NonFiniteError, ShapeError
from .nn.model import Model, cross_entropy

MAD_SCALE = 1.4826


@dataclass
class ReconstructionConfig:
    lambda_l1: float = 1e-3
    lambda_adapt: bool = True
    lambda_up: float = 1.5
    lambda_down: float = 1.5
    patience: int = 5
    target_success: float = 0.99
    steps: int = 300
    step_size: float = 0.1
    batch_size: int = 32
    check_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lambda_l1 <= 0:
            raise ValueError("lambda_l1 must be positive")
        if not 0.0 < self.target_success <= 1.0:
            raise ValueError("target_success must lie in (0, 1]")
        if self.steps < 1:
            raise ValueError("reconstruction needs at least one step")
        if self.lambda_up <= 1 or self.lambda_down <= 1:
            raise ValueError("lambda adaptation factors must exceed 1")
        if self.check_every < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("check_every, patience and batch_size must be positive")


@dataclass
class Trigger:
    mask: np.ndarray  # H x W
    pattern: np.ndarray  # H x W x C
    target: int
    l1: float
    attack_success: float
    lambda_trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.mask.shape != self.pattern.shape[:2]:
            raise ShapeError("mask and pattern disagree on H x W")

    def lambda_digest(self) -> str:
        return hashlib.sha256(np.asarray(self.lambda_trace, dtype=np.float64).tobytes()).hexdigest()[:16]


def apply_trigger(x, mask, pattern) -> np.ndarray:
    """Blend ``pattern`` into ``x`` with per-pixel weight ``mask``.

    ``x`` is H x W x C or N x H x W x C; ``mask`` is H x W and is shared by
    all channels.  float32 unless an argument is float64.
    """
    dtype = np.result_type(np.asarray(x).dtype, np.asarray(mask).dtype, np.asarray(pattern).dtype, np.float32)
    x = np.asarray(x, dtype=dtype)
    mask = np.asarray(mask, dtype=dtype)
    pattern = np.asarray(pattern, dtype=dtype)
    if x.shape[-3:] != pattern.shape or mask.shape != pattern.shape[:2]:
        raise ShapeError(f"trigger shapes {mask.shape}/{pattern.shape} do not fit input {x.shape}")
    m = mask[..., None]
    return (1 - m) * x + m * pattern


def squash(v):
    return (np.tanh(v) + 1) / 2


class _Adam:
    def __init__(self, shapes, lr, b1=0.5, b2=0.9, eps=1e-7):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        lr_t = self.lr * np.sqrt(1 - self.b2 ** self.t) / (1 - self.b1 ** self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr_t * m / (np.sqrt(v) + self.eps)


def _evaluate(model: Model, images, target, mask, pattern, lam, batch=256):
    """(mean CE, attack success, objective) of a trigger over all ``images``."""
    ce_sum, hits = 0.0, 0
    for i in range(0, len(images), batch):
        xb = apply_trigger(images[i:i + batch], mask, pattern)
        logits = model.forward(xb, logits=True)
        labels = np.full(len(xb), target)
        ce, _ = cross_entropy(logits, labels)
        ce_sum += ce * len(xb)
        hits += int((logits.argmax(axis=1) == target).sum())
    ce = ce_sum / len(images)
    return ce, hits / len(images), ce + lam * float(mask.sum())


def initial_variables(image_shape, seed: int, target: int):
    """(rng, mask vars, pattern vars); both squash to values near 0.5."""
    h, w, c = image_shape
    rng = np.random.default_rng(np.random.SeedSequence([seed, target]))
    mvar = rng.normal(0.0, 0.1, size=(h, w))
    pvar = rng.normal(0.0, 0.1, size=(h, w, c))
    return rng, mvar, pvar


def reconstruct_trigger(model: Model, X: LabeledDataset, target: int, cfg: ReconstructionConfig) -> Trigger:
    """Search for the smallest trigger sending ``X`` to ``target``.

    Checkpoints every ``cfg.check_every`` steps are scored on all of ``X``;
    the returned iterate minimises the objective under the final lambda over
    all checkpoints, the initial state included.
    """
    if len(X) == 0:
        raise ValueError("reconstruction needs clean inputs")
    rng, mvar, pvar = initial_variables(X.image_shape, cfg.seed, target)
    opt = _Adam([mvar.shape, pvar.shape], cfg.step_size)
    lam = cfg.lambda_l1
    lambda_trace = [lam]
    up = down = 0

    def score():
        m, p = squash(mvar), squash(pvar)
        ce, success, _ = _evaluate(model, X.images, target, m, p, lam)
        if not np.isfinite(ce):
            raise NonFiniteError(f"non-finite reconstruction objective for class {target}")
        return m.astype(np.float32), p.astype(np.float32), ce, success

    history = [score()]
    n = len(X)
    order = rng.permutation(n)
    pos = 0
    labels = np.full(cfg.batch_size, target)
    for step in range(1, cfg.steps + 1):
        if pos + cfg.batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        x = X.images[idx]
        m, p = squash(mvar), squash(pvar)
        xt = apply_trigger(x, m, p)
        logits = model.forward(xt, logits=True)
        _, dlogits = cross_entropy(logits, labels[:len(idx)])
        dx = model.backward(dlogits.astype(model.dtype), param_grads=False).astype(np.float64)
        grads = trigger_gradients(dx, x, mvar, pvar, lam)
        opt.step([mvar, pvar], grads)

        if step % cfg.check_every == 0 or step == cfg.steps:
            cand = score()
            history.append(cand)
            if cfg.lambda_adapt:
                if cand[3] >= cfg.target_success:
                    up, down = up + 1, 0
                else:
                    up, down = 0, down + 1
                if up >= cfg.patience:
                    lam *= cfg.lambda_up
                    up = 0
                elif down >= cfg.patience:
                    lam /= cfg.lambda_down
                    down = 0
                lambda_trace.append(lam)

    # every checkpoint, the initial state included, is ranked under the final lambda
    objectives = [ce + lam * float(m.sum()) for m, _, ce, _ in history]
    mask, pattern, _, success = history[int(np.argmin(objectives))]
    return Trigger(mask, pattern, int(target), float(mask.sum()), float(success), lambda_trace)


def trigger_gradients(dx, x, mvar, pvar, lam):
    """Chain d(loss)/d(x') back to the unconstrained mask and pattern variables.

    ``dx`` must already be the gradient of the batch-mean loss.
    """
    m, p = squash(mvar), squash(pvar)
    dm = (dx * (p - x)).sum(axis=(0, 3)) + lam
    dp = dx.sum(axis=0) * m[..., None]
    return [dm * (1 - np.tanh(mvar) ** 2) / 2, dp * (1 - np.tanh(pvar) ** 2) / 2]


def objective(model: Model, x, target: int, mask, pattern, lam: float) -> float:
    ce, _, obj = _evaluate(model, x, target, mask, pattern, lam)
    return obj


def reconstruct_all(model: Model, X: LabeledDataset, cfg: ReconstructionConfig) -> list[Trigger]:
    """One trigger per class, each seeded from (cfg.seed, class)."""
    return [reconstruct_trigger(model, X, t, cfg) for t in range(model.class_count)]


@dataclass
class ClassAnomalyReport:
    per_class_l1: np.ndarray
    anomaly_index: np.ndarray
    most_likely: int
    least_likely: int
    flagged: list
    degenerate: bool
    median: float
    mad: float


def mad_analysis(per_class_l1, threshold: float = 2.0) -> ClassAnomalyReport:
    """Median-absolute-deviation outlier scores of per-class trigger norms.

    ``most_likely`` is the smallest-norm class among small-side outliers
    (index above ``threshold``), else the global argmin.  ``least_likely`` is
    the largest-norm class, ties going to the lowest id.
    """
    l1 = np.asarray(per_class_l1, dtype=np.float64)
    if l1.size < 3:
        raise ValueError("MAD analysis needs at least three classes")
    median = float(np.median(l1))
    dev = np.abs(l1 - median)
    mad = float(np.median(dev))
    degenerate = mad == 0.0
    if degenerate:
        index = np.where(dev > 0, np.inf, 0.0)
    else:
        index = dev / (MAD_SCALE * mad)
    flagged = [int(c) for c in np.flatnonzero(index > threshold)]
    small = [c for c in flagged if l1[c] < median]
    most = min(small, key=lambda c: (l1[c], c)) if small else int(np.argmin(l1))
    least = int(np.argmax(l1))
    return ClassAnomalyReport(l1, index, int(most), least, flagged, degenerate, median, mad)


def save_trigger(trigger: Trigger, prefix) -> None:
    """``<prefix>-mask.idx`` and ``<prefix>-pattern.idx`` plus ``<prefix>.json``."""
    write_idx_tensor(trigger.mask, f"{prefix}-mask.idx")
    write_idx_tensor(trigger.pattern, f"{prefix}-pattern.idx")
    meta = {
        "target": trigger.target,
        "l1": trigger.l1,
        "attack_success": trigger.attack_success,
        "lambda_final": trigger.lambda_trace[-1] if trigger.lambda_trace else None,
        "lambda_digest": trigger.lambda_digest(),
    }
    Path(f"{prefix}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_trigger(prefix) -> Trigger:
    meta = json.loads(Path(f"{prefix}.json").read_text())
    mask = read_idx_tensor(f"{prefix}-mask.idx")
    pattern = read_idx_tensor(f"{prefix}-pattern.idx")
    lam = [meta["lambda_final"]] if meta.get("lambda_final") is not None else []
    return Trigger(mask, pattern, int(meta["target"]), float(meta["l1"]), float(meta["attack_success"]), lam)
