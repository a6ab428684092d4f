import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nnlaunder.data import synth_blobs
from nnlaunder.nn import Conv2D, Dense, Flatten, MaxPool2D, Model, ReLU, Softmax

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def tiny_cnn(seed=0, classes=4, shape=(8, 8, 1)):
    return Model([Conv2D(4, 3), ReLU(), MaxPool2D(2), Flatten(), Dense(8), ReLU(), Dense(classes), Softmax()],
                 shape, seed=seed)


@pytest.fixture
def blobs():
    return synth_blobs(4, 40, dims=(8, 8), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed after the run even when output is captured
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
