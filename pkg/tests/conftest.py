"""Shared fixtures and the acceptance-criteria summary hook."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from coneslam.sim import generate_track

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=50,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

# one line per acceptance criterion, printed after the test summary
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def criterion_report():
    def record(num: int, passed: bool, detail: str) -> None:
        status = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES.append((num, f"criterion {num}: {status} - {detail}"))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def track300():
    return generate_track(5, length=300.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
