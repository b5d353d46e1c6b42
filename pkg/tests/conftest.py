import numpy as np
import pytest

from crofdma.model import SystemConfig


@pytest.fixture
def cfg():
    return SystemConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(20160901)
