import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from meshclass.mesh import TriMesh, grid, icosahedron, icosphere, tetrahedron

settings.register_profile(
    "default", max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def tet():
    return tetrahedron()


@pytest.fixture
def ico():
    return icosahedron()


@pytest.fixture(scope="session")
def sphere3():
    return icosphere(3)


def two_triangles():
    """Planar unit square split along the (0, 2) diagonal."""
    v = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    return TriMesh(v, [[0, 1, 2], [0, 2, 3]])


def random_closed_mesh(seed, level=1):
    """Icosphere with jittered radii: closed, genus 0, well-shaped."""
    rng = np.random.default_rng(seed)
    m = icosphere(level)
    r = 1.0 + 0.15 * rng.uniform(-1, 1, m.n_vertices)
    return m.with_vertices(m.vertices * r[:, None])


def jittered_grid(seed, n=4):
    rng = np.random.default_rng(seed)
    g = grid(n, n)
    v = g.vertices + np.c_[0.2 * rng.uniform(-1, 1, (g.n_vertices, 2)), rng.normal(0, 0.3, g.n_vertices)]
    return g.with_vertices(v)


# acceptance lines are collected here and repeated in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    def record(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
