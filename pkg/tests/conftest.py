import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from n1gin.grid import make_grid  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def triangle():
    """Source 0, loads on 1 and 2, edge 2 (0-2) normally open."""
    return make_grid(3, [(0, 1), (1, 2), (0, 2)], loads=[0, 105, 105], impedance=1.0,
                     nominal_current=100.0, normally_open={2})


@pytest.fixture
def feeder():
    """OS -> A -> B with 105 kW each at 10.5 kV and 1 ohm cables."""
    return make_grid(3, [(0, 1), (1, 2)], loads=[0, 105, 105], impedance=1.0, nominal_current=100.0)


@pytest.fixture
def star():
    return make_grid(5, [(0, 1), (0, 2), (0, 3), (0, 4)], loads=[0, 10, 10, 10, 10])
