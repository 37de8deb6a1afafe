import numpy as np
import pytest

from dbtrecon.geometry import desk_geometry, tiny_geometry
from dbtrecon.projector import Projector, build_dense_operator


@pytest.fixture(scope="session")
def tiny():
    return tiny_geometry()


@pytest.fixture(scope="session")
def tiny_dense(tiny):
    return build_dense_operator(tiny)


@pytest.fixture(scope="session")
def desk():
    return desk_geometry()


@pytest.fixture(scope="session")
def desk_projector(desk):
    return Projector(desk)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_geometry():
    """8x8x2 grid for the solver cross-checks."""
    from dbtrecon.geometry import DetectorSpec, SourceArc, VoxelGrid, build_geometry

    return build_geometry(DetectorSpec.centered(12, 12, 1.0), SourceArc(5, 60.0, 30.0),
                          VoxelGrid.centered((8, 8, 2), (1.0, 1.0, 1.0)))


def small_truth(grid, seed=0):
    rng = np.random.default_rng(seed)
    x = np.full(grid.shape, 0.2)
    x[2:5, 3:6, :] += 0.5
    return x + 0.05 * rng.random(grid.shape)


@pytest.fixture(scope="session")
def small():
    return small_geometry()


# acceptance summary: one line per criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, seconds, note = ACCEPTANCE[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {seconds:7.2f} s  {title}"
        terminalreporter.write_line(line + (f"  ({note})" if note else ""))
