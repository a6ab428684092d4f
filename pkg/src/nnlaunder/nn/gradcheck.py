from __future__ import annotations

import numpy as np

from .layers import MaxPool2DLayer, ReLULayer
from .model import Model, cross_entropy


def _loss(model: Model, x, target, loss):
    out = model.forward(x, training=True, logits=True, dropout=False)
    if loss == "mse":
        diff = out - target
        return 0.5 * float((diff * diff).sum()) / len(x), diff / len(x)
    value, grad = cross_entropy(out, target)
    return value, grad


def _pattern(model: Model) -> list:
    """ReLU masks and max-pool winners from the last forward pass."""
    out = []
    for layer in model.layers:
        if isinstance(layer, ReLULayer):
            out.append(layer._cache.copy())
        elif isinstance(layer, MaxPool2DLayer):
            out.append(layer._cache[0].copy())
    return out


def _same(a, b) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def gradient_check(model: Model, batch, labels, eps: float = 1e-5, samples: int = 60,
                   seed: int = 0, loss: str = "xent") -> float:
    """Worst relative error between backprop and central differences.

    Runs on a float64 copy with dropout disabled (BatchNorm uses batch
    statistics).  At least ``samples`` parameter entries are checked, spread
    over every parameter tensor; entries sitting on a kink are swapped for
    others.  ``loss="mse"`` treats ``labels`` as real-valued targets with
    half squared error.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-6, 1e-2]")
    net = model.astype(np.float64)
    x = np.asarray(batch, dtype=np.float64)
    target = np.asarray(labels, dtype=np.float64 if loss == "mse" else np.int64)

    net.zero_grad()
    _, dout = _loss(net, x, target, loss)
    net.backward(dout)
    analytic = {(i, k): net.layers[i].grads[k].copy() for i, k, _ in net.parameters()}

    rng = np.random.default_rng(seed)
    tensors = list(net.parameters())
    per_tensor = max(1, -(-samples // len(tensors)))
    worst = 0.0
    for i, name, p in tensors:
        flat = p.reshape(-1)
        # entries whose +-eps probes straddle a ReLU or pooling kink have no
        # valid central difference; they are replaced by fresh draws
        order = rng.permutation(flat.size)
        checked = 0
        for j in order:
            if checked == min(per_tensor, flat.size):
                break
            old = flat[j]
            flat[j] = old + eps
            up, _ = _loss(net, x, target, loss)
            above = _pattern(net)
            flat[j] = old - eps
            down, _ = _loss(net, x, target, loss)
            below = _pattern(net)
            flat[j] = old
            if not _same(above, below):
                continue
            checked += 1
            numeric = (up - down) / (2 * eps)
            a = analytic[i, name].reshape(-1)[j]
            # floor keeps vanishing gradients from dominating via rounding noise
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
        if checked == 0:
            raise ArithmeticError(f"every probe of layer {i} {name} straddles a kink")
    return worst
