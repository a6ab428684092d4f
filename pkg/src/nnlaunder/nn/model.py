from __future__ import annotations

import copy
from typing import Iterator, Optional, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError
from .layers import PARAMETRIC, Layer, LayerSpec, log_softmax, make_layer


class Model:
    """A sequential network.

    ``forward`` returns the output of the last layer (probabilities when the
    stack ends in Softmax).  ``forward(..., logits=True)`` stops before a
    trailing Softmax, which is what the loss functions consume.
    """

    def __init__(
        self,
        specs: Sequence[LayerSpec],
        input_shape: Sequence[int],
        class_count: Optional[int] = None,
        seed: int = 0,
        dtype=np.float32,
    ):
        specs = list(specs)
        if not specs:
            raise ShapeError("a model needs at least one layer")
        for i, spec in enumerate(specs):
            if spec.kind == "Softmax" and i != len(specs) - 1:
                raise ShapeError("Softmax may only appear as the final layer")
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dtype = np.dtype(dtype)
        self.layers: list[Layer] = [make_layer(s) for s in specs]
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.build(shape, rng, self.dtype)
        if len(shape) != 1:
            raise ShapeError(f"final layer must produce a flat vector, got {shape}")
        if class_count is not None and class_count != shape[0]:
            raise ShapeError(f"output width {shape[0]} does not match class_count {class_count}")
        self.class_count = shape[0]

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def ends_in_softmax(self) -> bool:
        return self.layers[-1].kind == "Softmax"

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected batch of shape (N, {self.input_shape}), got {x.shape}")
        if x.shape[0] == 0:
            raise ShapeError("empty batch")
        if not np.isfinite(x).all():
            raise NonFiniteError("input batch contains NaN or Inf")
        return x.astype(self.dtype, copy=False)

    def forward(self, x, training=False, rng=None, logits=False, dropout=True):
        x = self._check_input(x)
        stop = len(self.layers) - 1 if (logits and self.ends_in_softmax) else len(self.layers)
        for layer in self.layers[:stop]:
            x = layer.forward(x, training=training, rng=rng, dropout=dropout)
        return x

    def forward_with_activations(self, x, training=False):
        x = self._check_input(x)
        acts = []
        for layer in self.layers:
            x = layer.forward(x, training=training)
            acts.append(x)
        return x, acts

    def backward(self, dout, from_logits=True, param_grads=True):
        """Backpropagate ``dout`` and accumulate parameter gradients.

        With ``from_logits`` and a trailing Softmax, ``dout`` is taken to be the
        gradient w.r.t. the pre-softmax logits.  Returns the input gradient;
        ``param_grads=False`` skips parameter-gradient accumulation.
        """
        layers = self.layers
        if from_logits and self.ends_in_softmax:
            layers = layers[:-1]
        for layer in reversed(layers):
            dout = layer.backward(dout, param_grads=param_grads)
        return dout

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self) -> Iterator[tuple[int, str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield i, name, value

    def state(self) -> list[tuple[int, str, np.ndarray]]:
        """All persistent arrays (params then buffers) in layer order."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                out.append((i, name, value))
            for name, value in layer.buffers.items():
                out.append((i, name, value))
        return out

    def set_array(self, layer_index: int, name: str, value):
        layer = self.layers[layer_index]
        target = layer.params if name in layer.params else layer.buffers
        if name not in target:
            raise KeyError(f"layer {layer_index} has no array {name!r}")
        if target[name].shape != value.shape:
            raise ShapeError(f"shape mismatch for layer {layer_index}.{name}")
        target[name] = np.array(value, dtype=self.dtype)

    def enforce_frozen(self):
        for layer in self.layers:
            layer.enforce_frozen()

    def parametric_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind in PARAMETRIC]

    def copy(self) -> "Model":
        clone = copy.deepcopy(self)
        for layer in clone.layers:
            layer._cache = None
        return clone

    def astype(self, dtype) -> "Model":
        clone = self.copy()
        clone.dtype = np.dtype(dtype)
        for layer in clone.layers:
            for store in (layer.params, layer.buffers, layer.grads):
                for k in store:
                    store[k] = store[k].astype(dtype)
        return clone

    def __repr__(self):
        kinds = ", ".join(layer.kind for layer in self.layers)
        return f"Model(input={self.input_shape}, classes={self.class_count}, [{kinds}])"


def forward(model: Model, batch) -> np.ndarray:
    return model.forward(batch)


def forward_with_activations(model: Model, batch):
    return model.forward_with_activations(batch)


def predict(model: Model, images, batch_size=512) -> np.ndarray:
    """Argmax class for each image, evaluated in inference mode."""
    out = [model.forward(images[i:i + batch_size]).argmax(axis=1) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def cross_entropy(logits, labels):
    """Mean categorical cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


def loss_and_grad(model: Model, x, labels, training=True, rng=None, dropout=True):
    """Forward + backward for cross-entropy; gradients land in ``layer.grads``.

    A network without a trailing Softmax is treated as emitting logits.
    """
    model.zero_grad()
    logits = model.forward(x, training=training, rng=rng, logits=True, dropout=dropout)
    loss, dlogits = cross_entropy(logits, labels)
    model.backward(dlogits.astype(model.dtype, copy=False))
    return loss, logits
