import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from treedock import data

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def exact4():
    """A sigma = 0 complex with four chains."""
    return data.generate_complex(7, 4)


@pytest.fixture(scope="session")
def noisy5():
    return data.generate_complex(11, 5, dimer_noise_sigma=0.1)
