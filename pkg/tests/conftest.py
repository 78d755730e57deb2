import numpy as np
import pytest

from mdmkit.config import TrainConfig
from mdmkit.dataio import ToySpec, gen_toy
from mdmkit.experts import build_pool
from mdmkit.projector import ArchSpec

SMALL_ARCH = ArchSpec((8, 12, 6), (8, 12, 6))


@pytest.fixture(scope="session")
def small_toy():
    return gen_toy(ToySpec(n_pairs=120, n_clusters=4, d_v_raw=8, d_t_raw=8, seed=3, n_test=40))


@pytest.fixture(scope="session")
def small_pool(small_toy):
    train, _ = small_toy
    return build_pool(train, SMALL_ARCH, 3, TrainConfig(epochs=4, lr=0.1, batch=32), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
