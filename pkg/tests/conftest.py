import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rampsim.core import Params, ring_geometry
from rampsim.lattice import build_slot_system

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

R5 = np.array([[0.2, 0.7, 0.1], [0.0, 0.8, 0.2], [0.5, 0.0, 0.5]])


@pytest.fixture(scope="session")
def params():
    return Params()


@pytest.fixture(scope="session")
def system_vf(params):
    return build_slot_system(ring_geometry(), params)


@pytest.fixture(scope="session")
def system_low(params):
    from rampsim.dynamics import ramp_run_for_speed
    run = ramp_run_for_speed(5.0, params)
    return build_slot_system(ring_geometry(ramp_run=(70.0, run, 70.0)), params)


# one line per acceptance criterion, printed after the run
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
