import numpy as np
import pytest

from hypoldp.fixtures import load_fixture

HYPO = ("heisenberg", "grushin", "engel")
ALL = ("elliptic", "heisenberg", "grushin", "engel", "counterexample")


@pytest.fixture(params=ALL)
def any_system(request):
    return request.param, load_fixture(request.param)


@pytest.fixture(params=HYPO)
def hypo_system(request):
    return request.param, load_fixture(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
