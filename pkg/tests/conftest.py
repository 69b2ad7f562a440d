import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adaptive_bddc.constraints import ConstraintSet, arithmetic_constraints  # noqa: E402
from adaptive_bddc.fem import Material, composite_bar_boxes, cube_problem  # noqa: E402
from adaptive_bddc.substructuring import substructure  # noqa: E402

COMPOSITE = {0: Material(young=1e6, poisson=0.45), 1: Material(young=2.1e11, poisson=0.3)}

CRITERIA = []


def record(number, passed, detail):
    """Remember an acceptance line; printed in the terminal summary."""
    CRITERIA.append((number, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def composite_problem(counts=(2, 2, 2), h=4):
    return cube_problem(counts, h, "elasticity", materials=COMPOSITE,
                        dirichlet=[("zmin", None)], loads=[("zmax", None)],
                        bars=[(b, 1) for b in composite_bar_boxes(counts, h)])


@pytest.fixture(scope="session")
def cube_ss():
    """2x2x2 elastic cube, H/h=4, clamped at x=0 (600 interface dofs)."""
    return substructure(cube_problem((2, 2, 2), 4, "elasticity"))


@pytest.fixture(scope="session")
def small_cube_ss():
    """2x2x2 elastic cube, H/h=2 (375 dofs)."""
    return substructure(cube_problem((2, 2, 2), 2, "elasticity"))


@pytest.fixture(scope="session")
def scalar_cube_ss():
    return substructure(cube_problem((2, 2, 2), 4, "scalar"))


@pytest.fixture(scope="session")
def composite_ss():
    return substructure(composite_problem())


@pytest.fixture(scope="session")
def bar_scalar_ss():
    """Two scalar subdomains stacked along z, fixed at z=0."""
    return substructure(cube_problem((1, 1, 2), 4, "scalar", dirichlet=[("zmin", None)],
                                     loads=[("zmax", None)]))


@pytest.fixture(scope="session")
def bar_elastic_ss():
    return substructure(cube_problem((1, 1, 2), 4, "elasticity", dirichlet=[("zmin", None)],
                                     loads=[("zmax", None)]))


def modes(ss):
    return {"c": ConstraintSet(), "c+e": arithmetic_constraints(ss, "edges"),
            "c+e+f": arithmetic_constraints(ss, "edges+faces")}


def continuous_copies(ss, rng, samples):
    """W vectors R u for random u in U."""
    u = rng.standard_normal((ss.maps.n_u, samples))
    return ss.maps.R @ u


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
