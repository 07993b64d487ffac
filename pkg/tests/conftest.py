import os

import numpy as np
import pytest
import torch

from biaspatch.data import make_toy_retail
from biaspatch.model_zoo import ClassifierHandle, SmallCNN, train_classifier

os.environ.setdefault("MPLBACKEND", "Agg")


@pytest.fixture(scope="session")
def small_data():
    """A 32x32 toy dataset, small enough for unit tests."""
    return make_toy_retail(seed=5, size=32, n_train=1500, n_test=200, n_val=100)


@pytest.fixture(scope="session")
def small_handle(small_data):
    """A quickly trained 32x32 classifier. Test accuracy is about 0.5, well above chance."""
    d = small_data["train"]
    return train_classifier(d.images, d.labels, arch={"width": 8, "n_blocks": 3}, epochs=8, lr=3e-3, batch_size=32, seed=0)


@pytest.fixture
def untrained_handle():
    torch.manual_seed(0)
    model = SmallCNN(num_classes=10, width=4, n_blocks=3)
    return ClassifierHandle(model, 10, (16, 16), ["conv1", "conv2", "conv3"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str, seconds: float) -> str:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail} [{seconds:.0f}s]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
