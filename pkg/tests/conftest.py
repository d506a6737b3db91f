from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

SCENARIO_DIR = Path(__file__).resolve().parents[1] / "scenarios"
ODE_SCENARIOS = ["linear-scalar", "double-integrator", "bilinear", "van-der-pol"]

# filled by the acceptance tests, printed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=ODE_SCENARIOS)
def scenario_name(request):
    return request.param


@pytest.fixture
def scenario_dir():
    return SCENARIO_DIR


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
