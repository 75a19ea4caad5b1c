import json
from pathlib import Path

import pytest

from billiard_capacity import geometry as geo

HERE = Path(__file__).parent
ROOT = HERE.parent
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def frozen():
    return json.loads((HERE / "frozen_values.json").read_text())


@pytest.fixture(scope="session")
def unit_disk():
    return geo.disk()


@pytest.fixture(scope="session")
def ellipse21():
    return geo.ellipse(2.0, 1.0)


@pytest.fixture(scope="session")
def super4():
    return geo.superellipse(4)


@pytest.fixture(scope="session")
def peanut_domain():
    return geo.peanut()


@pytest.fixture(scope="session")
def domains_dir():
    return ROOT / "domains"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def disk_orbit(unit_disk):
    from billiard_capacity.smoothed_flow import default_seed

    return default_seed(unit_disk, 1e-4)


@pytest.fixture(scope="session")
def disk_continuation(unit_disk):
    """``(trajectory, trace, orbits, seconds)`` for the default schedule."""
    import time

    from billiard_capacity.smoothed_flow import DEFAULT_SCHEDULE, continue_to_billiard, default_seed

    t0 = time.perf_counter()
    seed = default_seed(unit_disk, DEFAULT_SCHEDULE[0])
    traj, trace, orbits = continue_to_billiard(unit_disk, seed, DEFAULT_SCHEDULE)
    return traj, trace, orbits, time.perf_counter() - t0
