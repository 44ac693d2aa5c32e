import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from caprmil.numerics import precision

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: dict[int, list[str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        for line in ACCEPTANCE_LINES[key]:
            terminalreporter.write_line(line)


@pytest.fixture
def f64():
    with precision("float64"):
        yield


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)
