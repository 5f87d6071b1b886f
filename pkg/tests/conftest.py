from __future__ import annotations

import shutil
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from tierbench.config import dryrun_test_dir

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow],
)
settings.load_profile("default")

TIERS = ("T0", "T1", "T2", "T3", "T4", "T5", "T6")

# Reference values for the shipped hello-world fixtures.
TABLE_MEANS = (0.973, 0.970, 0.983, 0.983, 0.960, 0.983, 0.943)
TABLE_COP = (0.135, 0.127, 0.138, 0.129, 0.168, 0.065, 0.247)
TOKEN_ROWS = {
    "T0": (29, 656, 23106, 112686, 136477),
    "T1": (25, 558, 23266, 91477, 115326),
    "T2": (29, 711, 23350, 113858, 137948),
    "T3": (25, 668, 23352, 91771, 115816),
    "T4": (23, 725, 23556, 91828, 116132),
    "T5": (26, 625, 4629, 109368, 114648),
    "T6": (29, 722, 44337, 218778, 263866),
}


@pytest.fixture(scope="session")
def dryrun_results(tmp_path_factory):
    """One full scripted replay shared by read-only tests."""
    from tierbench.runner import dryrun

    out = tmp_path_factory.mktemp("dryrun")
    outcome = dryrun(out)
    return outcome, out / "test-001"


@pytest.fixture
def test_dir(tmp_path) -> Path:
    """A private, editable copy of the shipped hello-world test directory."""
    dest = tmp_path / "test-001"
    shutil.copytree(dryrun_test_dir(), dest)
    return dest


# One line per acceptance criterion, echoed again at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
