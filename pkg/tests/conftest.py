import numpy as np
import pytest

from ksr.model import ModelConfig, init_model
from ksr.toy import make_toy_kg
from ksr.trainer import TrainConfig, fit

TOY_MODEL = ModelConfig(n=4, d=4, sigma=0.04, seed=0)
TOY_TRAIN = TrainConfig(alpha=0.01, gamma=2.5, sigma=0.04, epochs=500, eval_every=10, patience=5, seed=0)


def random_model(rng, n, d, num_entities=5, num_relations=2, sigma=None, scale=1.0):
    """Model with N(0, scale) logits so distributions are far from uniform."""
    if sigma is None:
        sigma = float(rng.uniform(0.04, 1.0))
    m = init_model(ModelConfig(n=n, d=d, sigma=sigma), num_entities, num_relations, rng)
    for table in m.tables().values():
        table[...] = rng.normal(scale=scale, size=table.shape)
    return m


@pytest.fixture(scope="session")
def toy():
    return make_toy_kg()


@pytest.fixture(scope="session")
def trained_toy(toy):
    model, report = fit(toy.store, TOY_MODEL, TOY_TRAIN)
    return model, report


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from tests import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
