"""Activation-difference profiling and unit resets.

Units are Dense neurons or Conv2D output channels.  A unit's activation is
read after the nonlinearity that follows its layer (the layer output itself
when none does); conv channels are averaged over spatial positions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .data import LabeledDataset
from .errors import ShapeError
from .nn.layers import PARAMETRIC
from .nn.model import Model

THRESHOLD_MODES = ("absolute", "sigma")
RESET_MODES = ("zero", "layer-median")


def hidden_layers(model: Model) -> list[int]:
    """Indices of parametric layers that feed another parametric layer."""
    idx = model.parametric_indices()
    return idx[:-1]


def _probe_points(model: Model) -> dict[int, int]:
    """Map parametric layer -> index of the layer whose output is profiled."""
    probes = {}
    kinds = [layer.kind for layer in model.layers]
    for i in model.parametric_indices():
        probe = i
        for j in range(i + 1, len(kinds)):
            if kinds[j] in PARAMETRIC or kinds[j] in ("MaxPool2D", "Flatten", "Softmax"):
                break
            if kinds[j] == "ReLU":
                probe = j
                break
        probes[i] = probe
    return probes


@dataclass
class LayerProfile:
    layer: int
    kind: str
    aw_total: np.ndarray
    an_total: np.ndarray
    K: int
    I: int

    @property
    def aw_avg(self):
        return self.aw_total / self.K

    @property
    def an_avg(self):
        return self.an_total / self.I

    @property
    def diff(self):
        return self.aw_avg - self.an_avg


@dataclass
class ActivationProfile:
    layers: list

    def __getitem__(self, layer_index) -> LayerProfile:
        for lp in self.layers:
            if lp.layer == layer_index:
                return lp
        raise KeyError(layer_index)


def _unit_sums(model: Model, images, batch_size):
    probes = _probe_points(model)
    totals = {}
    for start in range(0, len(images), batch_size):
        _, acts = model.forward_with_activations(images[start:start + batch_size])
        for i, j in probes.items():
            a = acts[j].astype(np.float64)
            if a.ndim == 4:
                a = a.mean(axis=(1, 2))
            s = a.sum(axis=0)
            totals[i] = totals[i] + s if i in totals else s
    return totals


def profile_activations(model: Model, X: Union[LabeledDataset, np.ndarray], W, batch_size: int = 256) -> ActivationProfile:
    """Per-unit mean activations over ``W`` (watermarked) and ``X`` (clean)."""
    xi = X.images if hasattr(X, "images") else np.asarray(X)
    wk = W.images if hasattr(W, "images") else np.asarray(W)
    if len(xi) == 0 or len(wk) == 0:
        raise ValueError("profiling needs nonempty clean and watermark sets")
    for arr in (xi, wk):
        if arr.shape[1:] != model.input_shape:
            raise ShapeError(f"inputs of shape {arr.shape[1:]} do not fit model input {model.input_shape}")
    an = _unit_sums(model, xi, batch_size)
    aw = _unit_sums(model, wk, batch_size)
    layers = [LayerProfile(i, model.layers[i].kind, aw[i], an[i], len(wk), len(xi))
              for i in model.parametric_indices()]
    return ActivationProfile(layers)


@dataclass
class LaunderConfig:
    DT: float = 0.0
    CT: float = 0.0
    threshold_mode: str = "sigma"
    k: float = 2.0
    # inclusive (first, last) positions among parametric layers, or "second-half";
    # None means every hidden parametric layer
    layer_range: Optional[Union[tuple, str]] = None
    reset_mode: str = "zero"
    reset_batchnorm: bool = False
    strict_listing: bool = False

    def __post_init__(self):
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ValueError(f"threshold_mode must be one of {THRESHOLD_MODES}")
        if self.reset_mode not in RESET_MODES:
            raise ValueError(f"reset_mode must be one of {RESET_MODES}")
        if self.threshold_mode == "sigma" and not self.k > 0:
            raise ValueError("k must be positive in sigma mode")
        if np.isneginf(self.DT) or np.isneginf(self.CT) or np.isnan(self.DT) or np.isnan(self.CT):
            raise ValueError("thresholds must be finite or +inf")
        if isinstance(self.layer_range, str) and self.layer_range != "second-half":
            raise ValueError(f"unknown layer_range {self.layer_range!r}")
        if isinstance(self.layer_range, (list, tuple)):
            lo, hi = self.layer_range
            if lo < 0 or hi < lo:
                raise ValueError(f"bad layer_range {self.layer_range}")
            self.layer_range = (int(lo), int(hi))

    def eligible(self, model: Model) -> list[int]:
        params = model.parametric_indices()
        hidden = params[:-1]
        if self.layer_range is None:
            return hidden
        if self.layer_range == "second-half":
            return hidden[len(hidden) // 2:]
        lo, hi = self.layer_range
        if hi >= len(params):
            raise ValueError(f"layer_range {self.layer_range} exceeds the {len(params)} parametric layers")
        return params[lo:hi + 1]


@dataclass
class ResetReport:
    units: dict = field(default_factory=dict)  # model layer index -> sorted unit list
    thresholds: dict = field(default_factory=dict)
    mode: str = "sigma"

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.units.values())

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "total": self.total,
            "layers": {str(k): {"units": list(map(int, v)), "threshold": float(self.thresholds[k])}
                       for k, v in sorted(self.units.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ResetReport":
        layers = d.get("layers", {})
        return cls({int(k): list(v["units"]) for k, v in layers.items()},
                   {int(k): float(v["threshold"]) for k, v in layers.items()}, d.get("mode", "sigma"))


def layer_threshold(lp: LayerProfile, cfg: LaunderConfig) -> float:
    if cfg.threshold_mode == "sigma":
        d = lp.diff
        return float(d.mean() + cfg.k * d.std())
    return float(cfg.DT if lp.kind == "Dense" else cfg.CT)


def select_resets(profile: ActivationProfile, cfg: LaunderConfig, eligible=None) -> ResetReport:
    """Pick units whose activation difference exceeds their layer's threshold.

    ``eligible`` restricts the model layers considered (see
    ``LaunderConfig.eligible``); by default every profiled layer is.
    With ``cfg.strict_listing`` the clean-input average is compared instead.
    """
    report = ResetReport(mode=cfg.threshold_mode)
    for lp in profile.layers:
        if eligible is not None and lp.layer not in eligible:
            continue
        t = layer_threshold(lp, cfg)
        stat = lp.an_avg if cfg.strict_listing else lp.diff
        report.units[lp.layer] = [int(u) for u in np.flatnonzero(stat > t)]
        report.thresholds[lp.layer] = t
    return report


def _following_batchnorm(model: Model, i: int):
    for j in range(i + 1, len(model.layers)):
        kind = model.layers[j].kind
        if kind == "BatchNorm":
            return model.layers[j]
        if kind in PARAMETRIC:
            return None
    return None


def apply_resets(model: Model, report: ResetReport, cfg: LaunderConfig, inplace: bool = False) -> Model:
    """Reset the incoming weights and bias of every reported unit.

    Reset units are recorded in ``layer.frozen`` so later optimizer steps
    keep them pinned.
    """
    net = model if inplace else model.copy()
    for i, units in report.units.items():
        if not units:
            continue
        if not 0 <= i < len(net.layers) or net.layers[i].kind not in PARAMETRIC:
            raise IndexError(f"layer {i} is not a Dense or Conv2D layer")
        layer = net.layers[i]
        w, b = layer.params["W"], layer.params["b"]
        units = np.asarray(units, dtype=np.int64)
        if len(np.unique(units)) != len(units) or units.min() < 0 or units.max() >= b.shape[0]:
            raise IndexError(f"reset units {units.tolist()} out of range for layer {i} of width {b.shape[0]}")
        if cfg.reset_mode == "zero":
            value = 0.0
        else:
            keep = np.ones(b.shape[0], dtype=bool)
            keep[units] = False
            rest = w[..., keep]
            value = float(np.median(rest)) if rest.size else 0.0
        for u in units:
            layer.frozen[int(u)] = value
        layer.enforce_frozen()
        if cfg.reset_batchnorm:
            bn = _following_batchnorm(net, i)
            if bn is not None:
                bn.reset_channels(units)
    return net
