from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nsms.field_core import Grid

settings.register_profile("nsms", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("nsms")


def disk(grid: Grid, centre, r) -> np.ndarray:
    X, Y = grid.centers()
    return ((X - centre[0]) ** 2 + (Y - centre[1]) ** 2 < r * r).astype(float)


def half_plane(grid: Grid, x0: float = 0.5) -> np.ndarray:
    X, _ = grid.centers()
    return (X < x0).astype(float)


@pytest.fixture
def unit32() -> Grid:
    return Grid(32, 32)


@pytest.fixture
def unit64() -> Grid:
    return Grid(64, 64)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
