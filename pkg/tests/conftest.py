import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dapsearch.synthworld import WorldConfig, generate_dataset
from dapsearch.trainer import TrainConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL_WORLD = WorldConfig(n_source_scenes=10, n_target_scenes=8, n_test_scenes=8,
                          n_source_ids=6, n_target_ids=6, n_test_ids=4)


@pytest.fixture(scope="session")
def small_world():
    return SMALL_WORLD


@pytest.fixture(scope="session")
def small_snapshot():
    return generate_dataset(SMALL_WORLD, seed=11)


@pytest.fixture
def quick_config():
    return TrainConfig(epochs=4, alpha=1, lr_decay_epoch=3, eval_every=2, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_boxes(rng, n, size=20.0, extent=40.0):
    xy = rng.uniform(0.0, extent, size=(n, 2))
    wh = rng.uniform(1.0, size, size=(n, 2))
    return np.hstack([xy, xy + wh])


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; returns the flag for asserting."""
    def record(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f": {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
