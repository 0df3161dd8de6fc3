import numpy as np
import pytest

from paimfl.config import ExperimentConfig
from paimfl.model_data import load_mnist, synthetic_gaussian

# the trained MNIST setting used by the convergence checks and demos
DESK = dict(rounds=30, clients=10, eta=1.5, local_lr=0.15, local_steps=10, momentum=0.7,
            drift_correction=True, batch_size=50, classes_per_client=2)

SMALL = dict(dataset="synthetic", layer_dims=(20, 16, 10), synthetic_per_class=60,
             rounds=3, clients=3, eta=0.5)


@pytest.fixture(scope="session")
def mnist():
    return load_mnist()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cfg():
    return ExperimentConfig(**SMALL)


@pytest.fixture(scope="session")
def blobs():
    return synthetic_gaussian(10, 60, 20, seed=3)


ACCEPTANCE_LINES = []


def acceptance_line(n, ok, text):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
