"""Procedurally rendered 28x28 glyph images in the style of MNIST.

Characters are drawn with OpenCV's Hershey vector fonts under random stroke
width, rotation, shear, scale and elastic jitter, then cropped into a 20x20
box and centred by mass inside a 28x28 frame, the way MNIST digits were
normalised.  Used as an offline stand-in when real IDX files are absent.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .data import LabeledDataset, read_idx, write_idx

FONTS = (
    cv2.FONT_HERSHEY_SIMPLEX,
    cv2.FONT_HERSHEY_DUPLEX,
    cv2.FONT_HERSHEY_COMPLEX,
    cv2.FONT_HERSHEY_TRIPLEX,
    cv2.FONT_HERSHEY_SCRIPT_SIMPLEX,
    cv2.FONT_HERSHEY_SCRIPT_COMPLEX,
    cv2.FONT_HERSHEY_PLAIN,
)

_CANVAS = 96


def render_glyph(char: str, rng: np.random.Generator) -> np.ndarray:
    """One distorted glyph as a 28x28 float32 array in [0, 1]."""
    font = FONTS[rng.integers(len(FONTS))]
    if rng.random() < 0.3:
        font |= cv2.FONT_ITALIC
    scale = 2.2 if font & 0xF == cv2.FONT_HERSHEY_PLAIN else 1.8
    thickness = int(rng.integers(4, 10))
    canvas = np.zeros((_CANVAS, _CANVAS), dtype=np.uint8)
    (tw, th), _ = cv2.getTextSize(char, font, scale, thickness)
    org = ((_CANVAS - tw) // 2, (_CANVAS + th) // 2)
    cv2.putText(canvas, char, org, font, scale, 255, thickness, cv2.LINE_AA)

    angle = rng.uniform(-15, 15)
    shear = rng.uniform(-0.3, 0.3)
    sx, sy = rng.uniform(0.8, 1.15, size=2)
    c = _CANVAS / 2
    rot = cv2.getRotationMatrix2D((c, c), angle, 1.0)
    affine = np.array([[sx, shear, 0], [0, sy, 0]], dtype=np.float64)
    affine[:, 2] = [c - sx * c - shear * c, c - sy * c]
    m = _compose(rot, affine)
    canvas = cv2.warpAffine(canvas, m, (_CANVAS, _CANVAS), flags=cv2.INTER_LINEAR)
    canvas = _elastic(canvas, rng, alpha=rng.uniform(0, 6), sigma=6)

    ys, xs = np.nonzero(canvas > 20)
    if len(ys) == 0:
        return np.zeros((28, 28), dtype=np.float32)
    crop = canvas[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
    h, w = crop.shape
    f = 20.0 / max(h, w)
    nh, nw = max(1, round(h * f)), max(1, round(w * f))
    small = cv2.resize(crop, (nw, nh), interpolation=cv2.INTER_AREA).astype(np.float32)
    out = np.zeros((28, 28), dtype=np.float32)
    mass = small.sum()
    cy = (small.sum(axis=1) @ np.arange(nh)) / mass
    cx = (small.sum(axis=0) @ np.arange(nw)) / mass
    top = int(np.clip(round(14 - cy), 0, 28 - nh))
    left = int(np.clip(round(14 - cx), 0, 28 - nw))
    out[top:top + nh, left:left + nw] = small
    out /= max(out.max(), 1.0)
    return np.clip(out, 0, 1)


def _compose(a, b):
    a3 = np.vstack([a, [0, 0, 1]])
    b3 = np.vstack([b, [0, 0, 1]])
    return (a3 @ b3)[:2]


def _elastic(img, rng, alpha, sigma):
    if alpha <= 0:
        return img
    h, w = img.shape
    dx = cv2.GaussianBlur(rng.uniform(-1, 1, (h, w)).astype(np.float32), (0, 0), sigma) * alpha * sigma
    dy = cv2.GaussianBlur(rng.uniform(-1, 1, (h, w)).astype(np.float32), (0, 0), sigma) * alpha * sigma
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    return cv2.remap(img, gx + dx, gy + dy, interpolation=cv2.INTER_LINEAR)


def render_set(chars: str, per_class: int, seed: int = 0, class_count: int | None = None) -> LabeledDataset:
    """``per_class`` renderings of each character; label = position in ``chars``."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(chars)), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = np.stack([render_glyph(chars[y], rng) for y in labels])
    return LabeledDataset(images[..., None], labels, class_count or len(chars))


def synth_digits(per_class: int, seed: int = 0) -> LabeledDataset:
    return render_set("0123456789", per_class, seed)


def synth_letters(letters: str, per_class: int, seed: int = 0) -> LabeledDataset:
    """Letter glyphs labelled by 1-based alphabet position, like EMNIST letters."""
    data = render_set(letters, per_class, seed, class_count=27)
    positions = np.array([ord(ch.lower()) - ord("a") + 1 for ch in letters])
    return LabeledDataset(data.images, positions[data.labels], 27)


def digit_corpus(train_per_class: int, test_per_class: int, seed: int = 0, cache_dir=None):
    """(train, test) synthetic digit splits, optionally cached as IDX files.

    Train and test are rendered from independent seed streams.
    """
    def build():
        s_train, s_test = np.random.SeedSequence(seed).spawn(2)
        return (synth_digits(train_per_class, int(s_train.generate_state(1)[0])),
                synth_digits(test_per_class, int(s_test.generate_state(1)[0])))

    if cache_dir is None:
        return build()
    root = Path(cache_dir)
    stem = f"digits-{train_per_class}-{test_per_class}-{seed}"
    names = [root / f"{stem}-{part}-{kind}.idx" for part in ("train", "test") for kind in ("images", "labels")]
    if all(p.exists() for p in names):
        return (read_idx(names[0], names[1], class_count=10), read_idx(names[2], names[3], class_count=10))
    train, test = build()
    root.mkdir(parents=True, exist_ok=True)
    # IDX stores bytes, so return what a later cache hit would return
    write_idx(train, names[0], names[1])
    write_idx(test, names[2], names[3])
    return (read_idx(names[0], names[1], class_count=10), read_idx(names[2], names[3], class_count=10))
