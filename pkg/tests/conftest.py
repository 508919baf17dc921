import json
import math
from pathlib import Path

import numpy as np
import pytest

from pinloss.materials import load_material
from pinloss.transport import DeviceGeometry

DATA = Path(__file__).with_name("data")

# filled by test_acceptance; printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def si():
    return load_material("si_860nm")


@pytest.fixture(scope="session")
def ingaas():
    return load_material("ingaas_1550nm")


@pytest.fixture(scope="session")
def si_device(si):
    return DeviceGeometry(100e-6, 100.0), si


@pytest.fixture(scope="session")
def oracle_values():
    return json.loads((DATA / "oracle_values.json").read_text())


@pytest.fixture
def constant_transfer():
    def transfer(omega, x):
        return np.full(np.shape(x), 1.0 + 0.0j)

    return transfer


def omega(freq_hz):
    return 2 * math.pi * freq_hz


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
