import numpy as np
import pytest

from perfhom.assembly import CoefficientField
from perfhom.cell import compute_cell
from perfhom.mesh import generate_cell_mesh


def oscillatory():
    return CoefficientField(lambda y: 1.0 / (2.0 + np.cos(2 * np.pi * y[:, 0]) * np.cos(2 * np.pi * y[:, 1])),
                            1 / 3, 1.0, "oscillatory")


def laminate():
    return CoefficientField(lambda y: 1.0 / (2.0 + np.cos(2 * np.pi * y[:, 0])), 1 / 3, 1.0, "laminate")


@pytest.fixture(scope="session")
def osc():
    return oscillatory()


@pytest.fixture(scope="session")
def lam():
    return laminate()


@pytest.fixture(scope="session")
def cell_mesh_04():
    return generate_cell_mesh(0.4, 1 / 32)


@pytest.fixture(scope="session")
def coarse_cell_04():
    """Cell mesh used to tile micro meshes (h = eps / 8)."""
    return generate_cell_mesh(0.4, 1 / 8)


@pytest.fixture(scope="session")
def coarse_cell_solution(coarse_cell_04, osc):
    return compute_cell(coarse_cell_04, osc)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one ``CRITERION n: PASS|FAIL`` line, echoed in the terminal summary."""

    def _report(number, passed, detail):
        line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
