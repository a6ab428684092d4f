"""Layer specs and their forward/backward implementations (NHWC layout)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .. import kernels
from ..errors import ShapeError

KINDS = ("Conv2D", "Dense", "MaxPool2D", "ReLU", "Softmax", "Dropout", "BatchNorm", "Flatten")
PARAMETRIC = ("Conv2D", "Dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    padding: str = "valid"
    units: Optional[int] = None
    pool: Optional[int] = None
    rate: Optional[float] = None
    momentum: float = 0.99
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "Conv2D":
            _positive(self, "filters", "kernel")
            if self.padding not in ("valid", "same"):
                raise ValueError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        if self.kind == "Dense":
            _positive(self, "units")
        if self.kind == "MaxPool2D":
            _positive(self, "pool")
        if self.kind in ("Conv2D", "MaxPool2D") and self.stride is not None and self.stride <= 0:
            raise ValueError("stride must be positive")
        if self.kind == "Dropout":
            if self.rate is None or not 0.0 <= self.rate < 1.0:
                raise ValueError("dropout rate must lie in [0, 1)")
        if self.kind == "BatchNorm" and not (0.0 < self.momentum < 1.0 and self.epsilon > 0):
            raise ValueError("BatchNorm needs momentum in (0,1) and epsilon > 0")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def _positive(spec, *names):
    for name in names:
        value = getattr(spec, name)
        if value is None or value <= 0:
            raise ValueError(f"{spec.kind}.{name} must be a positive integer")


def Conv2D(filters, kernel, stride=1, padding="valid"):
    return LayerSpec("Conv2D", filters=filters, kernel=kernel, stride=stride, padding=padding)


def Dense(units):
    return LayerSpec("Dense", units=units)


def MaxPool2D(pool=2, stride=None):
    return LayerSpec("MaxPool2D", pool=pool, stride=stride if stride is not None else pool)


def ReLU():
    return LayerSpec("ReLU")


def Softmax():
    return LayerSpec("Softmax")


def Dropout(rate):
    return LayerSpec("Dropout", rate=rate)


def BatchNorm(momentum=0.99, epsilon=1e-3):
    return LayerSpec("BatchNorm", momentum=momentum, epsilon=epsilon)


def Flatten():
    return LayerSpec("Flatten")


class Layer:
    """Runtime layer.  ``params`` are trained, ``buffers`` are not."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        # unit index -> value its incoming weights and bias are pinned to
        self.frozen: dict[int, float] = {}
        self.input_shape: tuple = ()
        self.output_shape: tuple = ()
        self._cache = None

    @property
    def kind(self):
        return self.spec.kind

    def build(self, input_shape, rng, dtype):
        self.input_shape = tuple(input_shape)
        self.output_shape = self._output_shape(self.input_shape)
        self._init_params(rng, dtype)
        return self.output_shape

    def _output_shape(self, s):
        return s

    def _init_params(self, rng, dtype):
        pass

    def forward(self, x, training=False, rng=None, dropout=True):
        raise NotImplementedError

    def backward(self, dout, param_grads=True):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def enforce_frozen(self):
        if not self.frozen:
            return
        w, b = self.params["W"], self.params["b"]
        for unit, value in self.frozen.items():
            w[..., unit] = value
            b[unit] = value


def _fan_in_uniform(rng, shape, fan_in, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2DLayer(Layer):
    def _output_shape(self, s):
        if len(s) != 3:
            raise ShapeError(f"Conv2D expects (H, W, C) input, got {s}")
        h, w, _ = s
        k, st = self.spec.kernel, self.spec.stride or 1
        if self.spec.padding == "same":
            oh, ow = -(-h // st), -(-w // st)
        else:
            if h < k or w < k:
                raise ShapeError(f"Conv2D kernel {k} larger than input {s}")
            oh, ow = (h - k) // st + 1, (w - k) // st + 1
        return (oh, ow, self.spec.filters)

    def _init_params(self, rng, dtype):
        k, cin, cout = self.spec.kernel, self.input_shape[2], self.spec.filters
        self.params["W"] = _fan_in_uniform(rng, (k, k, cin, cout), k * k * cin, dtype)
        self.params["b"] = np.zeros(cout, dtype=dtype)
        self.zero_grad()

    def _pads(self):
        if self.spec.padding != "same":
            return (0, 0), (0, 0)
        h, w, _ = self.input_shape
        oh, ow, _ = self.output_shape
        k, st = self.spec.kernel, self.spec.stride or 1
        ph = max((oh - 1) * st + k - h, 0)
        pw = max((ow - 1) * st + k - w, 0)
        return (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)

    def forward(self, x, training=False, rng=None, dropout=True):
        ph, pw = self._pads()
        if any(ph) or any(pw):
            x = np.pad(x, ((0, 0), ph, pw, (0, 0)))
        x = np.ascontiguousarray(x)
        k, st = self.spec.kernel, self.spec.stride or 1
        cols = kernels.im2col(x, k, k, st)
        w2 = self.params["W"].reshape(-1, self.spec.filters)
        out = cols @ w2 + self.params["b"]
        self._cache = (cols, x.shape)
        return out.reshape((x.shape[0],) + self.output_shape)

    def backward(self, dout, param_grads=True):
        cols, xp_shape = self._cache
        k, st = self.spec.kernel, self.spec.stride or 1
        d2 = dout.reshape(-1, self.spec.filters)
        w2 = self.params["W"].reshape(-1, self.spec.filters)
        if param_grads:
            self.grads["W"] += (cols.T @ d2).reshape(self.params["W"].shape)
            self.grads["b"] += d2.sum(axis=0)
        dx = kernels.col2im(d2 @ w2.T, xp_shape, k, k, st)
        ph, pw = self._pads()
        h, w = self.input_shape[:2]
        return dx[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :]


class DenseLayer(Layer):
    def _output_shape(self, s):
        if len(s) != 1:
            raise ShapeError(f"Dense expects flat input, got {s}")
        return (self.spec.units,)

    def _init_params(self, rng, dtype):
        fan_in = self.input_shape[0]
        self.params["W"] = _fan_in_uniform(rng, (fan_in, self.spec.units), fan_in, dtype)
        self.params["b"] = np.zeros(self.spec.units, dtype=dtype)
        self.zero_grad()

    def forward(self, x, training=False, rng=None, dropout=True):
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout, param_grads=True):
        x = self._cache
        if param_grads:
            self.grads["W"] += x.T @ dout
            self.grads["b"] += dout.sum(axis=0)
        return dout @ self.params["W"].T


class ReLULayer(Layer):
    def forward(self, x, training=False, rng=None, dropout=True):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout, param_grads=True):
        return np.where(self._cache, dout, 0).astype(dout.dtype, copy=False)


class MaxPool2DLayer(Layer):
    def _output_shape(self, s):
        if len(s) != 3:
            raise ShapeError(f"MaxPool2D expects (H, W, C) input, got {s}")
        p, st = self.spec.pool, self.spec.stride or self.spec.pool
        if s[0] < p or s[1] < p:
            raise ShapeError(f"pool {p} larger than input {s}")
        return ((s[0] - p) // st + 1, (s[1] - p) // st + 1, s[2])

    def forward(self, x, training=False, rng=None, dropout=True):
        p, st = self.spec.pool, self.spec.stride or self.spec.pool
        out, arg = kernels.maxpool_forward(np.ascontiguousarray(x), p, st)
        self._cache = (arg, x.shape)
        return out

    def backward(self, dout, param_grads=True):
        arg, shape = self._cache
        p, st = self.spec.pool, self.spec.stride or self.spec.pool
        return kernels.maxpool_backward(np.ascontiguousarray(dout), arg, tuple(shape), p, st)


class FlattenLayer(Layer):
    def _output_shape(self, s):
        return (int(np.prod(s)),)

    def forward(self, x, training=False, rng=None, dropout=True):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout, param_grads=True):
        return dout.reshape(self._cache)


class DropoutLayer(Layer):
    def forward(self, x, training=False, rng=None, dropout=True):
        rate = self.spec.rate
        if not (training and dropout) or rate == 0.0:
            self._cache = None
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
        self._cache = keep
        return x * keep

    def backward(self, dout, param_grads=True):
        return dout if self._cache is None else dout * self._cache


class BatchNormLayer(Layer):
    def _init_params(self, rng, dtype):
        c = self.input_shape[-1]
        self.params["gamma"] = np.ones(c, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers["running_var"] = np.ones(c, dtype=dtype)
        self.zero_grad()

    def reset_channels(self, channels):
        for name, value in (("gamma", 1), ("beta", 0)):
            self.params[name][channels] = value
        self.buffers["running_mean"][channels] = 0
        self.buffers["running_var"][channels] = 1

    def forward(self, x, training=False, rng=None, dropout=True):
        axes = tuple(range(x.ndim - 1))
        eps = x.dtype.type(self.spec.epsilon)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.dtype.type(self.spec.momentum)
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv, training)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dout, param_grads=True):
        xhat, inv, training = self._cache
        axes = tuple(range(dout.ndim - 1))
        gamma = self.params["gamma"]
        if param_grads:
            self.grads["gamma"] += (dout * xhat).sum(axis=axes)
            self.grads["beta"] += dout.sum(axis=axes)
        dxhat = dout * gamma
        if not training:
            return dxhat * inv
        m = dout.size // dout.shape[-1]
        return (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


class SoftmaxLayer(Layer):
    def forward(self, x, training=False, rng=None, dropout=True):
        p = softmax(x)
        self._cache = p
        return p

    def backward(self, dout, param_grads=True):
        p = self._cache
        return p * (dout - (dout * p).sum(axis=-1, keepdims=True))


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


_IMPLS = {
    "Conv2D": Conv2DLayer,
    "Dense": DenseLayer,
    "ReLU": ReLULayer,
    "MaxPool2D": MaxPool2DLayer,
    "Flatten": FlattenLayer,
    "Dropout": DropoutLayer,
    "BatchNorm": BatchNormLayer,
    "Softmax": SoftmaxLayer,
}


def make_layer(spec: LayerSpec) -> Layer:
    return _IMPLS[spec.kind](spec)
