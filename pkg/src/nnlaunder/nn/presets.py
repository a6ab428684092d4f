"""Reference architectures for the watermarked classifiers."""

from .layers import BatchNorm, Conv2D, Dense, Dropout, Flatten, MaxPool2D, ReLU, Softmax
from .model import Model


def _mnist_zhang():
    return [
        Conv2D(32, 5), ReLU(),
        MaxPool2D(2),
        Conv2D(16, 5), ReLU(),
        MaxPool2D(2),
        Flatten(),
        Dense(512), ReLU(),
        Dense(10), Softmax(),
    ], (28, 28, 1)


def _mnist_plus():
    return [
        Conv2D(32, 3), ReLU(),
        Conv2D(32, 3), ReLU(),
        MaxPool2D(2),
        Conv2D(64, 3), ReLU(),
        Conv2D(64, 3), ReLU(),
        MaxPool2D(2),
        Flatten(),
        Dense(200), ReLU(), Dropout(0.5),
        Dense(200), ReLU(), Dropout(0.5),
        Dense(16), Softmax(),
    ], (28, 28, 1)


def _cifar_zhang():
    def block(filters):
        return [Conv2D(filters, 3, padding="same"), BatchNorm(), ReLU()]

    return [
        *block(32), *block(32), MaxPool2D(2), Dropout(0.2),
        *block(64), *block(64), MaxPool2D(2), Dropout(0.3),
        *block(128), *block(128), MaxPool2D(2), Dropout(0.4),
        Flatten(),
        Dense(10), Softmax(),
    ], (32, 32, 3)


PRESETS = {
    "mnist-zhang": _mnist_zhang,
    "mnist-plus": _mnist_plus,
    "cifar-zhang": _cifar_zhang,
}


def build_preset(name: str, seed: int = 0) -> Model:
    try:
        specs, input_shape = PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return Model(specs, input_shape, seed=seed)
