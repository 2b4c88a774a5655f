import numpy as np
import pytest

from nllinknet import tensor as T


@pytest.fixture(autouse=True, scope="session")
def single_thread():
    T.set_threads(1)
    yield
    T.set_threads(None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")
