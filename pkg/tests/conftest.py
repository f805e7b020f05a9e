import numpy as np
import pytest

from volmoments import build_explicit_model, build_lattice_model


@pytest.fixture(scope="session")
def default_model():
    return build_lattice_model()


def two_state(rate=1.0, prices=(100.0, 120.0), **kw):
    L = np.array([[-rate, rate], [rate, -rate]])
    return build_explicit_model(L, prices, 0, **kw)


def random_generator(n, rng, scale=2.0):
    a = rng.random((n, n)) * scale
    np.fill_diagonal(a, 0.0)
    np.fill_diagonal(a, -a.sum(axis=1))
    return a


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.LINES:
        terminalreporter.write_line(line)
