import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_psd(rng, k, rank=None):
    G = rng.standard_normal((k, rank or k + 2))
    return G @ G.T / G.shape[1]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
