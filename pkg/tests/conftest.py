from pathlib import Path

import numpy as np
import pytest

from dynbc.forward import TimeWindow
from dynbc.grid import build_grid
from dynbc.model import AdmissibleBounds, Coefficients


@pytest.fixture(scope="session")
def grid_small():
    return build_grid(8, 16, 0.3)


@pytest.fixture(scope="session")
def grid_mid():
    return build_grid(16, 32, 0.3)


@pytest.fixture(scope="session")
def grid_desk():
    return build_grid(32, 64, 0.3)


@pytest.fixture(scope="session")
def window():
    return TimeWindow(1.0, 0.25, 0.75)


@pytest.fixture(scope="session")
def bounds():
    return AdmissibleBounds(0.5, 2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def variable_mid(grid_mid):
    return Coefficients.preset(grid_mid, "variable")


@pytest.fixture(scope="session")
def repo_root():
    return Path(__file__).resolve().parent.parent


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion; returns ``ok``."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
        print(line)
        _ACCEPTANCE[number] = line
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
