from __future__ import annotations

import sys
from importlib.resources import files

import numpy as np
import pytest

from pgnn_pf.case_model import adjacency, build_admittance, load_case, parse_case

THREE_BUS = """\
BASEMVA 100
BUS
# id type Pd Qd Gs Bs Vset ThetaSet
1 3 0 0 0 0 1.02 0
2 1 50 20 5 10 1 0
3 2 30 10 0 0 1.01 0
BRANCH
# from to r x b tap shift
1 2 0.02 0.06 0.03 0 0
1 3 0.08 0.24 0.025 0.98 3
2 3 0.06 0.18 0.02 0 0
GEN
1 200 0
3 100 40
"""

# lossless line, slack at bus 1, load at bus 2
TWO_BUS = """\
BUS
1 3 0 0 0 0 1.0 0
2 1 0 0 0 0 1.0 0
BRANCH
1 2 0 0.1 0 0 0
GEN
1 100
"""


def case_path(name: str) -> str:
    return str(files("pgnn_pf") / "cases" / f"{name}.case")


@pytest.fixture(scope="session")
def three_bus():
    return parse_case(THREE_BUS)


@pytest.fixture(scope="session")
def two_bus():
    return parse_case(TWO_BUS)


@pytest.fixture(scope="session")
def case57():
    return load_case(case_path("ieee57"))


@pytest.fixture(scope="session")
def case118():
    return load_case(case_path("ieee118"))


@pytest.fixture(scope="session")
def y57(case57):
    return build_admittance(case57)


@pytest.fixture(scope="session")
def adj57(case57):
    return adjacency(case57)


def random_state(rng, n, v_spread=0.1, th_spread=0.3):
    from pgnn_pf.acpf import PolarState

    return PolarState(rng.uniform(1 - v_spread, 1 + v_spread, n), rng.uniform(-th_spread, th_spread, n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[num])
