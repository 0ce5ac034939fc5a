"""Shared test configuration.

Hypothesis runs with a fixed profile: no deadline (conv oracles are slow on
purpose) and print_blob for reproducing failures.
"""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "prnet",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
    print_blob=True,
)
settings.load_profile("prnet")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
