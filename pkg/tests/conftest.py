import numpy as np
import pytest

from h2plasma.bemops import assemble_galerkin
from h2plasma.mesh import generate_sphere


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def ball_points(rng, n, radius=1.0):
    x = rng.standard_normal((n, 3))
    x /= np.linalg.norm(x, axis=1)[:, None]
    return x * radius * rng.random((n, 1)) ** (1.0 / 3.0)


@pytest.fixture(scope="session")
def sphere2():
    return generate_sphere(2)


@pytest.fixture(scope="session")
def sphere3():
    return generate_sphere(3)


@pytest.fixture(scope="session")
def mats2(sphere2):
    return assemble_galerkin(sphere2)


@pytest.fixture(scope="session")
def mats3(sphere3):
    return assemble_galerkin(sphere3)


@pytest.fixture(scope="session")
def sphere4():
    return generate_sphere(4)


@pytest.fixture(scope="session")
def mats4(sphere4):
    return assemble_galerkin(sphere4)


# (criterion, passed, detail) lines collected by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
