import numpy as np
import pytest

from c1hier.bspline import uniform_space
from c1hier.c1space import build_c1_space
from c1hier.geometry import bundled_geometry, compute_gluing


def make_c1(geometry: str, p: int = 3, nel: int = 2, smoothness: str = "c1"):
    geom = bundled_geometry(geometry)
    return build_c1_space(geom, compute_gluing(geom), uniform_space(p, p - 2, nel), smoothness)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def lshape():
    return bundled_geometry("lshape")


@pytest.fixture(scope="session")
def curved():
    return bundled_geometry("curved")


@pytest.fixture(scope="session")
def squares():
    return bundled_geometry("two_squares")


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance")
        for line in mod.LINES:
            terminalreporter.write_line(line)
