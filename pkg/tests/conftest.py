import numpy as np
import pytest

from graphprune.data import make_synthetic
from graphprune.graph import load_bundled
from graphprune.trainer import GraphPruningModel, TrainConfig, train


@pytest.fixture(scope="session")
def synth4():
    """4-class 8x8 synthetic data split into train / recal / eval."""
    return make_synthetic(4, 480, 8, seed=0).split(0.6, 0.1)


@pytest.fixture(scope="session")
def v1_reduced():
    return load_bundled("mobilenet_v1_reduced")


@pytest.fixture
def trained_v1(v1_reduced, synth4):
    cfg = TrainConfig(epochs=2, seed=0)
    model = GraphPruningModel(v1_reduced, 4, cfg)
    train(model, synth4[0], cfg)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    """Store the pass/fail line of one acceptance criterion for the terminal summary."""
    ACCEPTANCE[number] = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
