import numpy as np
import pytest

from grouprobust import classifier as C
from grouprobust import data as D
from grouprobust.attack import AttackConfig, Budget


class Toy:
    """10-class blob task with a benignly trained 8-32-10 MLP."""

    dim = 8
    classes = 10

    def __init__(self):
        self.full, self.gt = D.synth_clusters(self.classes, self.dim, 100, 0.03, seed=1)
        self.train, self.test, self.val = D.split(self.full, (0.7, 0.2, 0.1), seed=1)
        self.model = C.Mlp.initialize([self.dim, 32, self.classes], seed=1)
        C.train(self.model, self.train, C.TrainConfig(learning_rate=0.1, epochs=30, batch_size=32, seed=1))
        self.budget = Budget("linf", 0.1)
        self.cfg = AttackConfig(iterations=20)


@pytest.fixture(scope="session")
def toy():
    return Toy()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def linear_model(W, b=None):
    W = np.asarray(W, dtype=np.float64)
    b = np.zeros(W.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return C.Mlp([W.shape[1], W.shape[0]], [W], [b])


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
