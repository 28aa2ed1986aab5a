import os
import sys

import numpy as np
import pytest

SRC_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src')
if SRC_DIR not in sys.path:
    sys.path.insert(0, SRC_DIR)

from flow_model import FlowArchitecture, build_appendix_flow, build_flow  # noqa: E402
from flow_training import calibrate_running_stats  # noqa: E402
from synthetic_data import ScenarioSpec, sample  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: долгие сквозные проверки")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_flow():
    """Небольшой поток с BatchNorm в s/t сетях."""
    return build_flow(FlowArchitecture(dim=3, n_layers=2, hidden=4), seed=7)


@pytest.fixture
def plain_flow():
    """Тот же поток без BatchNorm."""
    return build_flow(FlowArchitecture(dim=3, n_layers=2, hidden=4, batchnorm=False), seed=7)


@pytest.fixture(scope="session")
def appendix_p():
    return sample(ScenarioSpec('appendix_2d', n=8192, seed=1))


@pytest.fixture(scope="session")
def appendix_q():
    return sample(ScenarioSpec('uniform_q', n=4096, seed=2))


@pytest.fixture(scope="session")
def appendix_model(appendix_p):
    """Coupling-слой z2 = x2 + BN(x1) с gamma=1, beta=0 и статистиками по данным p."""
    return calibrate_running_stats(build_appendix_flow(), appendix_p, batch_size=64, seed=0)


@pytest.fixture(scope="session")
def appendix8_p():
    return sample(ScenarioSpec('appendix_2d', n=4096, seed=11, params={'pairs': 8}))


@pytest.fixture(scope="session")
def appendix8_model(appendix8_p):
    return calibrate_running_stats(build_appendix_flow(pairs=8), appendix8_p, batch_size=64, seed=0)


@pytest.fixture(scope="session")
def appendix128_p():
    return sample(ScenarioSpec('appendix_2d', n=4096, seed=41, params={'pairs': 128}))


@pytest.fixture(scope="session")
def appendix128_model(appendix128_p):
    """128 независимых пар: сигнал rank на образец растёт с числом пар."""
    return calibrate_running_stats(build_appendix_flow(pairs=128), appendix128_p, batch_size=64, seed=0)
