"""Multi-round laundering: reconstruct, reset, retrain, measure."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data import LabeledDataset, SplitSpec, concat
from .launder import LaunderConfig, ResetReport, apply_resets, profile_activations, select_resets
from .nn.model import Model, predict
from .nn.presets import build_preset
from .nn.train import OptimizerConfig, train
from .reconstruct import (ClassAnomalyReport, ReconstructionConfig, Trigger, apply_trigger,
                          mad_analysis, reconstruct_all)
from .watermark import WatermarkedDataset

log = logging.getLogger(__name__)

ROUND_COLUMNS = ("round", "test_acc", "wm_acc", "resets", "early_stopped")


def derive_seed(seed: int, name: str, *keys: int) -> int:
    """Named, reproducible sub-stream seed (e.g. ``derive_seed(7, "recon", 2)``)."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8")), *map(int, keys)])
    return int(ss.generate_state(1)[0])


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6g}"


@dataclass
class RoundConfig:
    rounds: int = 3
    retrain: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(learning_rate=1e-3, epochs=20))
    recon: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    launder: LaunderConfig = field(default_factory=LaunderConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    per_image_mask_copies: Optional[int] = None  # None: |X| // 10
    mad_threshold: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.per_image_mask_copies is not None and self.per_image_mask_copies < 0:
            raise ValueError("per_image_mask_copies must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class RoundRecord:
    round: int
    test_accuracy: float
    wm_accuracy: Optional[float]
    resets: dict
    most_likely: int
    least_likely: int
    early_stopped: bool = False
    anomaly: Optional[ClassAnomalyReport] = field(default=None, repr=False)
    triggers: list = field(default_factory=list, repr=False)
    reset_report: Optional[ResetReport] = field(default=None, repr=False)

    def __post_init__(self):
        for acc in (self.test_accuracy, self.wm_accuracy):
            if acc is not None and not 0.0 <= acc <= 1.0:
                raise ValueError("accuracies must lie in [0, 1]")

    @property
    def reset_total(self) -> int:
        return int(sum(self.resets.values()))

    def to_dict(self) -> dict:
        d = {
            "round": self.round,
            "test_accuracy": self.test_accuracy,
            "wm_accuracy": self.wm_accuracy,
            "resets": {str(k): int(v) for k, v in sorted(self.resets.items())},
            "most_likely": self.most_likely,
            "least_likely": self.least_likely,
            "early_stopped": self.early_stopped,
        }
        if self.anomaly is not None:
            d["per_class_l1"] = [float(v) for v in self.anomaly.per_class_l1]
            d["anomaly_index"] = [float(v) for v in self.anomaly.anomaly_index]
            d["mad_degenerate"] = bool(self.anomaly.degenerate)
        return d


@dataclass
class ExperimentReport:
    config_digest: str
    records: list
    vanilla_threshold: Optional[float] = None

    @property
    def verdict(self) -> Optional[bool]:
        """True when the final watermark accuracy is strictly below the threshold."""
        if not self.records or self.vanilla_threshold is None or self.records[-1].wm_accuracy is None:
            return None
        return self.records[-1].wm_accuracy < self.vanilla_threshold

    @property
    def margin(self) -> Optional[float]:
        if self.verdict is None:
            return None
        return self.vanilla_threshold - self.records[-1].wm_accuracy

    def to_dict(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "vanilla_threshold": self.vanilla_threshold,
            "verdict": self.verdict,
            "margin": self.margin,
            "rounds": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def rounds_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ROUND_COLUMNS)
        for r in self.records:
            w.writerow([r.round, fmt(r.test_accuracy), fmt(r.wm_accuracy), r.reset_total, fmt(r.early_stopped)])
        return buf.getvalue()


def matrix_csv(matrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    k = matrix.shape[1]
    w.writerow(["true"] + [str(j) for j in range(k)])
    for i, row in enumerate(matrix):
        w.writerow([i] + [int(v) for v in row])
    return buf.getvalue()


def render_mask(trigger: Trigger, background: float = 0.5) -> np.ndarray:
    """The trigger drawn on a flat mid-gray canvas."""
    canvas = np.full(trigger.pattern.shape, background, dtype=np.float32)
    return apply_trigger(canvas, trigger.mask, trigger.pattern)


def assemble_retrain_set(X: LabeledDataset, triggers: Sequence[Trigger], least_likely: int,
                         cfg: RoundConfig) -> LabeledDataset:
    """X, then X under each trigger with its own labels, then mask renderings.

    The renderings (``cfg.per_image_mask_copies`` of them, cycling over the
    triggers) are labelled ``least_likely``.
    """
    triggers = list(triggers)
    if not triggers:
        raise ValueError("at least one trigger is required")
    parts = [X]
    for t in triggers:
        parts.append(LabeledDataset(apply_trigger(X.images, t.mask, t.pattern), X.labels, X.class_count))
    copies = cfg.per_image_mask_copies if cfg.per_image_mask_copies is not None else len(X) // 10
    if copies:
        rendered = np.stack([render_mask(t) for t in triggers])
        images = rendered[np.arange(copies) % len(triggers)]
        parts.append(LabeledDataset(images, np.full(copies, least_likely), X.class_count))
    return concat(parts)


@dataclass
class Evaluation:
    test_accuracy: float
    wm_accuracy: Optional[float]
    confusion: np.ndarray  # watermark set when given, else the test set
    test_confusion: np.ndarray

    def __iter__(self):
        return iter((self.test_accuracy, self.wm_accuracy, self.confusion))


def confusion_matrix(true, pred, class_count: int) -> np.ndarray:
    m = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(m, (np.asarray(true), np.asarray(pred)), 1)
    return m


def evaluate(model: Model, test: LabeledDataset, wm_eval: Optional[WatermarkedDataset] = None) -> Evaluation:
    """Argmax accuracies plus confusion counts (rows true, columns predicted).

    Watermark rows use the underlying images' true labels when known, so the
    column spread shows where triggered inputs land.
    """
    k = model.class_count
    pred = predict(model, test.images)
    test_conf = confusion_matrix(test.labels, pred, k)
    test_acc = float((pred == test.labels).mean())
    if wm_eval is None:
        return Evaluation(test_acc, None, test_conf, test_conf)
    if len(wm_eval) == 0:
        raise ValueError("watermark set is empty")
    wpred = predict(model, wm_eval.images)
    rows = wm_eval.source_labels if wm_eval.source_labels is not None else wm_eval.labels
    wm_conf = confusion_matrix(rows, wpred, k)
    return Evaluation(test_acc, float((wpred == wm_eval.labels).mean()), wm_conf, test_conf)


def launder_round(model: Model, X: LabeledDataset, wm_eval: Optional[WatermarkedDataset],
                  test: LabeledDataset, cfg: RoundConfig, round_index: int = 1,
                  mad_fn: Callable = mad_analysis, stop_class: Optional[int] = None) -> tuple[Model, RoundRecord]:
    """One reconstruct / reset / retrain pass.

    ``wm_eval`` is only read by the final ``evaluate`` call.  When the MAD
    ranking puts ``stop_class`` last, the round ends before resetting or
    retraining and the model is returned unchanged with ``early_stopped`` set.
    """
    recon = dataclasses.replace(cfg.recon, seed=derive_seed(cfg.seed, "recon", round_index))
    triggers = reconstruct_all(model, X, recon)
    anomaly = mad_fn(np.array([t.l1 for t in triggers]), cfg.mad_threshold)
    suspect = triggers[anomaly.most_likely]
    log.info("round %d: most likely %d, least likely %d", round_index, anomaly.most_likely, anomaly.least_likely)
    if stop_class is not None and anomaly.least_likely == stop_class:
        ev = evaluate(model, test, wm_eval)
        return model, RoundRecord(round_index, ev.test_accuracy, ev.wm_accuracy, {}, anomaly.most_likely,
                                  anomaly.least_likely, early_stopped=True, anomaly=anomaly, triggers=triggers,
                                  reset_report=ResetReport(mode=cfg.launder.threshold_mode))

    W = apply_trigger(X.images, suspect.mask, suspect.pattern)
    profile = profile_activations(model, X, W)
    report = select_resets(profile, cfg.launder, eligible=cfg.launder.eligible(model))
    net = apply_resets(model, report, cfg.launder)

    retrain_set = assemble_retrain_set(X, [suspect], anomaly.least_likely, cfg)
    retrain_cfg = dataclasses.replace(cfg.retrain, seed=derive_seed(cfg.seed, "launder", round_index))
    train(net, retrain_set, retrain_cfg)

    ev = evaluate(net, test, wm_eval)
    record = RoundRecord(round_index, ev.test_accuracy, ev.wm_accuracy,
                         {k: len(v) for k, v in report.units.items()},
                         anomaly.most_likely, anomaly.least_likely,
                         anomaly=anomaly, triggers=triggers, reset_report=report)
    return net, record


@dataclass
class LaunderingData:
    X: LabeledDataset  # the adversary's limited clean split
    test: LabeledDataset
    wm_eval: Optional[WatermarkedDataset] = None
    vanilla_threshold: Optional[float] = None


def run_laundering(model: Model, data: LaunderingData, cfg: RoundConfig,
                   on_round: Optional[Callable] = None, mad_fn: Callable = mad_analysis):
    """Iterate ``launder_round``; returns (final model, ExperimentReport).

    Stops early once the class first ranked most likely becomes the least
    likely one.  ``on_round(record, model)`` is called after every round.
    """
    records = []
    first_suspect = None
    for r in range(1, cfg.rounds + 1):
        model, rec = launder_round(model, data.X, data.wm_eval, data.test, cfg, r, mad_fn=mad_fn,
                                   stop_class=first_suspect)
        if first_suspect is None:
            first_suspect = rec.most_likely
        records.append(rec)
        if on_round is not None:
            on_round(rec, model)
        if rec.early_stopped:
            break
    return model, ExperimentReport(cfg.digest(), records, data.vanilla_threshold)


def vanilla_curve(arch: Union[str, Model], clean: LabeledDataset, wm_eval, cfg: OptimizerConfig,
                  seed: int = 0):
    """Watermark accuracy of a cleanly trained model after each epoch.

    ``wm_eval`` may be a dict of named sets, measured during one shared
    training run; the result is then a dict of curves.
    """
    sets = wm_eval if isinstance(wm_eval, dict) else {None: wm_eval}
    if isinstance(arch, str):
        model = build_preset(arch, seed=seed)
    else:
        model = arch.copy()
    curves = {name: [] for name in sets}

    def record(epoch, net):
        for name, wm in sets.items():
            curves[name].append(float((predict(net, wm.images) == wm.labels).mean()))

    train(model, clean, cfg, on_epoch_end=record)
    return curves if isinstance(wm_eval, dict) else curves[None]


def vanilla_threshold(arch: Union[str, Model], clean: LabeledDataset, wm_eval: WatermarkedDataset,
                      cfg: OptimizerConfig, seed: int = 0) -> float:
    """Highest watermark accuracy a never-watermarked model reaches over training."""
    curve = vanilla_curve(arch, clean, wm_eval, cfg, seed)
    if not curve:
        raise ValueError("vanilla threshold needs at least one training epoch")
    return max(curve)
