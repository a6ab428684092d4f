"""Backdoor watermark families: construction, embedding and measurement."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .data import LabeledDataset, read_idx, write_idx
from .nn.model import Model, predict
from .nn.train import Interleave, OptimizerConfig, train

log = logging.getLogger(__name__)

KINDS = ("content", "noise", "unrelated", "trigger-set", "backdoor-shift")

# 7x7 block glyph stamped into the bottom-right corner by default
DEFAULT_STAMP = np.array(
    [
        [1, 1, 1, 1, 1, 1, 1],
        [1, 0, 0, 1, 0, 0, 1],
        [1, 0, 1, 1, 1, 0, 1],
        [1, 1, 1, 0, 1, 1, 1],
        [1, 0, 1, 1, 1, 0, 1],
        [1, 0, 0, 1, 0, 0, 1],
        [1, 1, 1, 1, 1, 1, 1],
    ],
    dtype=np.uint8,
)


@dataclass
class WatermarkScheme:
    kind: str
    target_label: int = 0
    # content / backdoor-shift
    stamp: np.ndarray = field(default_factory=lambda: DEFAULT_STAMP.copy())
    stamp_intensity: float = 1.0
    position: Optional[tuple] = None  # top-left (row, col); None = bottom-right corner
    # noise
    sigma: float = 0.3
    alpha: float = 1.0
    seed: int = 0
    # trigger-set
    count: int = 100
    label_seed: int = 0
    # backdoor-shift
    offset: int = 1
    # unrelated: pool of replacement images (not serialised)
    source: Optional[LabeledDataset] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown watermark kind {self.kind!r}")
        self.stamp = np.asarray(self.stamp, dtype=np.uint8)
        if not np.isin(self.stamp, (0, 1)).all():
            raise ValueError("stamp mask must be {0,1}-valued")
        if self.kind == "noise" and self.sigma <= 0:
            raise ValueError("noise sigma must be positive")
        if not 0.0 <= self.stamp_intensity <= 1.0:
            raise ValueError("stamp intensity must lie in [0, 1]")

    @property
    def scheme_id(self) -> str:
        return self.kind

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "target_label": self.target_label,
            "seed": self.seed,
        }
        if self.kind in ("content", "backdoor-shift"):
            d.update(stamp=self.stamp.tolist(), stamp_intensity=self.stamp_intensity,
                     position=list(self.position) if self.position is not None else None)
        if self.kind == "noise":
            d.update(sigma=self.sigma, alpha=self.alpha)
        if self.kind == "trigger-set":
            d.update(count=self.count, label_seed=self.label_seed)
        if self.kind == "backdoor-shift":
            d.update(offset=self.offset)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkScheme":
        d = dict(d)
        if d.get("position") is not None:
            d["position"] = tuple(d["position"])
        if "stamp" in d:
            d["stamp"] = np.array(d["stamp"], dtype=np.uint8)
        return cls(**d)


@dataclass
class WatermarkedDataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: str
    # true labels of the underlying images, when they have any
    source_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) == 0:
            raise ValueError("watermark set is empty")
        if len(self.images) != len(self.labels):
            raise ValueError("image/label count mismatch")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("watermark images must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)


def _stamp_region(scheme: WatermarkScheme, h: int, w: int):
    sh, sw = scheme.stamp.shape
    r, c = scheme.position if scheme.position is not None else (h - sh, w - sw)
    if r < 0 or c < 0 or r + sh > h or c + sw > w:
        raise ValueError(f"stamp of shape {scheme.stamp.shape} at {(r, c)} exceeds image bounds {(h, w)}")
    return r, c, sh, sw


def noise_pattern(scheme: WatermarkScheme, shape) -> np.ndarray:
    return np.random.default_rng(scheme.seed).normal(0.0, scheme.sigma, size=shape).astype(np.float32)


def apply_scheme(image: np.ndarray, scheme: WatermarkScheme) -> np.ndarray:
    """Overlay a content stamp or additive noise on one image or a batch.

    Works on H x W x C or N x H x W x C arrays; always returns a copy.
    """
    if scheme.kind not in ("content", "noise", "backdoor-shift"):
        raise ValueError(f"{scheme.kind} watermarks replace images rather than modify them")
    image = np.array(image, dtype=np.float32)
    h, w = image.shape[-3:-1]
    if scheme.kind == "noise":
        noise = noise_pattern(scheme, image.shape[-3:])
        return np.clip(image + np.float32(scheme.alpha) * noise, 0.0, 1.0)
    r, c, sh, sw = _stamp_region(scheme, h, w)
    region = image[..., r:r + sh, c:c + sw, :]
    mask = scheme.stamp.astype(bool)[:, :, None]
    region[...] = np.where(mask, np.float32(scheme.stamp_intensity), region)
    return image


def abstract_images(count: int, shape, seed: int) -> np.ndarray:
    """Seeded compositions of filled polygons, used as abstract trigger images."""
    rng = np.random.default_rng(seed)
    h, w, ch = shape
    out = np.empty((count, h, w, ch), dtype=np.float32)
    for k in range(count):
        canvas = np.full((h, w, ch), rng.uniform(0, 0.4, size=ch), dtype=np.float32)
        for _ in range(int(rng.integers(3, 7))):
            pts = rng.integers(0, [w, h], size=(int(rng.integers(3, 6)), 2)).astype(np.int32)
            colour = tuple(float(v) for v in rng.uniform(0.2, 1.0, size=ch))
            cv2.fillPoly(canvas, [pts], colour)
        out[k] = canvas
    return np.clip(out, 0, 1)


def make_watermark_set(base: Optional[LabeledDataset], scheme: WatermarkScheme, count: int,
                       class_count: Optional[int] = None, image_shape=None, seed: int = 0) -> WatermarkedDataset:
    """Build ``count`` watermark items.

    Content and noise items are drawn from ``base`` images whose label differs
    from the target, so a clean model is not credited for correct answers.
    ``seed`` picks which base or pool items are used.
    """
    class_count = class_count or (base.class_count if base is not None else None)
    rng = np.random.default_rng(seed)
    kind = scheme.kind
    if kind == "trigger-set":
        shape = image_shape or (base.image_shape if base is not None else None)
        if shape is None or class_count is None:
            raise ValueError("trigger-set needs an image shape and class count")
        n = count or scheme.count
        images = abstract_images(n, shape, scheme.seed)
        labels = np.random.default_rng(scheme.label_seed).integers(0, class_count, size=n)
        return WatermarkedDataset(images, labels, class_count, kind)

    if kind == "unrelated":
        pool = scheme.source
        if pool is None:
            raise ValueError("unrelated watermark needs a source pool")
        if len(pool) < count:
            raise ValueError(f"source pool has {len(pool)} images, {count} requested")
        pick = np.sort(rng.choice(len(pool), size=count, replace=False))
        return WatermarkedDataset(pool.images[pick], np.full(count, scheme.target_label), class_count, kind)

    if base is None:
        raise ValueError(f"{kind} watermark needs base images")
    if kind in ("content", "noise") and scheme.target_label >= class_count:
        raise ValueError("target label outside the class range")
    eligible = np.arange(len(base)) if kind == "backdoor-shift" else np.flatnonzero(base.labels != scheme.target_label)
    if len(eligible) < count:
        raise ValueError(f"only {len(eligible)} eligible base images, {count} requested")
    pick = np.sort(rng.choice(eligible, size=count, replace=False))
    images = apply_scheme(base.images[pick], scheme)
    truth = base.labels[pick]
    if kind == "backdoor-shift":
        labels = (truth + scheme.offset) % class_count
    else:
        labels = np.full(count, scheme.target_label)
    return WatermarkedDataset(images, labels, class_count, kind, source_labels=truth)


def interleave_count(batch_size: int) -> int:
    return max(1, math.ceil(batch_size / 25))


def embed_from_scratch(model: Model, clean: LabeledDataset, wm: Optional[WatermarkedDataset],
                       cfg: OptimizerConfig, per_batch: Optional[int] = None,
                       target_accuracy: float = 0.98) -> Model:
    """Train a copy of ``model`` on ``clean`` with watermark items mixed into every batch."""
    net = model.copy()
    inter = None
    if wm is not None and len(wm):
        inter = Interleave(wm.images, wm.labels, per_batch if per_batch is not None else interleave_count(cfg.batch_size))
    train(net, clean, cfg, interleave=inter)
    if inter is not None and cfg.epochs > 0:
        acc = wm_accuracy(net, wm)
        if acc < target_accuracy:
            log.warning("watermark accuracy %.4f below target %.4f", acc, target_accuracy)
    return net


def embed_pretrained(model: Model, wm: WatermarkedDataset, clean_subset: LabeledDataset,
                     cfg: OptimizerConfig, per_batch: Optional[int] = None,
                     target_accuracy: float = 0.98) -> Model:
    """Fine-tune an already-trained model so it also learns the watermark."""
    return embed_from_scratch(model, clean_subset, wm, cfg, per_batch, target_accuracy)


def wm_accuracy(model: Model, wm: WatermarkedDataset) -> float:
    if len(wm) == 0:
        raise ValueError("watermark set is empty")
    return float((predict(model, wm.images) == wm.labels).mean())


def save_watermark_set(wm: WatermarkedDataset, scheme: WatermarkScheme, prefix) -> None:
    """Persist as ``<prefix>-images.idx``/``<prefix>-labels.idx`` plus ``<prefix>.json``."""
    prefix = Path(prefix)
    write_idx(LabeledDataset(wm.images, wm.labels, wm.class_count),
              f"{prefix}-images.idx", f"{prefix}-labels.idx")
    sidecar = {"provenance": wm.provenance, "class_count": wm.class_count, "scheme": scheme.to_dict()}
    if wm.source_labels is not None:
        sidecar["source_labels"] = wm.source_labels.tolist()
    Path(f"{prefix}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_watermark_set(prefix) -> tuple[WatermarkedDataset, WatermarkScheme]:
    prefix = Path(prefix)
    sidecar = json.loads(Path(f"{prefix}.json").read_text())
    data = read_idx(f"{prefix}-images.idx", f"{prefix}-labels.idx", class_count=sidecar["class_count"])
    src = sidecar.get("source_labels")
    wm = WatermarkedDataset(data.images, data.labels, sidecar["class_count"], sidecar["provenance"],
                            source_labels=np.array(src) if src is not None else None)
    return wm, WatermarkScheme.from_dict(sidecar["scheme"])
