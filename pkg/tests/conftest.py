import math

import numpy as np
import pytest

from escsoc.model import CellConfig, OCVData, ParameterTable


def scalar_step(z, ir1, ir2, h, i, tau1, tau2, gamma, dt, q, eta=1.0):
    """Independent pure-Python ESC state update (used as an oracle)."""
    i = float(i)
    a1 = math.exp(-dt / tau1)
    a2 = math.exp(-dt / tau2)
    ah = math.exp(-abs(i * eta * gamma * dt / q))
    s = float(i > 0) - float(i < 0)
    return (z - eta * dt / q * i,
            a1 * ir1 + (1 - a1) * i,
            a2 * ir2 + (1 - a2) * i,
            ah * h + (ah - 1) * s)


def scalar_voc(soc_grid, v_grid, z):
    """Linear interpolation with end clamping, written out by hand."""
    if z <= soc_grid[0]:
        return v_grid[0]
    if z >= soc_grid[-1]:
        return v_grid[-1]
    for k in range(len(soc_grid) - 1):
        if soc_grid[k] <= z <= soc_grid[k + 1]:
            w = (z - soc_grid[k]) / (soc_grid[k + 1] - soc_grid[k])
            return v_grid[k] + w * (v_grid[k + 1] - v_grid[k])
    raise AssertionError("unreachable")


@pytest.fixture
def cfg():
    return CellConfig(capacity_q=18000.0, dt=1.0)


@pytest.fixture
def ocv():
    soc = np.linspace(0, 1, 11)
    v_mean = 3.3 + 0.8 * soc + 0.05 * np.sin(3 * soc)
    return OCVData.from_mean(soc, v_mean, 0.01 + 0.01 * np.sin(np.pi * soc))


@pytest.fixture
def table():
    bp = np.array([0.1, 0.4, 0.7, 0.95])
    vals = np.array([
        [0.030, 0.012, 0.020, 4.0, 100.0, 0.012, 120.0],
        [0.020, 0.008, 0.012, 5.0, 120.0, 0.020, 100.0],
        [0.021, 0.009, 0.013, 6.0, 140.0, 0.018, 90.0],
        [0.028, 0.011, 0.018, 5.5, 160.0, 0.010, 110.0],
    ])
    return ParameterTable(bp, vals, "esc")


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
