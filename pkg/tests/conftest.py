import os
import time

import numpy as np
import pytest

import skelred
from skelred.harness import CaseSpec
from skelred.mechanism import load_mechanism, parse_mechanism

DATA = os.path.join(os.path.dirname(skelred.__file__), "data")
CORPUS = os.path.join(os.path.dirname(__file__), "corpus")
AIR = {"O2": 0.21, "N2": 0.79}

ACCEPTANCE = []  # (criterion, line) recorded by test_acceptance.py
BUILD_TIME = {}  # fixture name -> seconds spent building it


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


def data_path(name):
    return os.path.join(DATA, name)


@pytest.fixture(scope="session")
def h2o2():
    return load_mechanism(data_path("h2o2.mech"))


@pytest.fixture(scope="session")
def methane():
    return load_mechanism(data_path("methane.mech"))


@pytest.fixture(scope="session")
def gri30():
    return load_mechanism(data_path("gri30.mech"))


def hydrogen_case(T0=1200.0, P_atm=10.0, phi=1.0, dt=1e-7, t_end=1.5e-4, case_id="h2"):
    return CaseSpec.make(case_id, T0, P_atm, phi, {"H2": 1.0}, AIR, dt, t_end)


@pytest.fixture(scope="session")
def h2_case():
    return hydrogen_case()


@pytest.fixture(scope="session")
def h2_trajectory(h2o2, h2_case):
    from skelred.fom import integrate_state

    return integrate_state(h2o2, h2_case.initial_state(h2o2), h2_case.dt, h2_case.t_end)


def sampled_states(mech, trajectory, count, seed):
    """``count`` trajectory states drawn without replacement (fixed seed)."""
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(trajectory.step_count + 1, size=count, replace=False))
    return [trajectory.state(int(k)) for k in idx]


# species data reused by small hand-built mechanisms
_THERMO = {
    "A": ("A 28.014 N:2", "3.5 0 0 0 0 -1000.0 4.0"),
    "B": ("B 28.014 N:2", "3.5 0 0 0 0 -1000.0 4.0"),
    "C": ("C 28.014 N:2", "3.5 0 0 0 0 -1000.0 4.0"),
}


def toy_mechanism(reactions, names=("A", "B")):
    """Isomer species with constant cp and equal enthalpy; ``reactions`` are lines."""
    lines = ["ELEMENTS", "  N", "END", "SPECIES"]
    for n in names:
        head, poly = _THERMO.get(n, (f"{n} 28.014 N:2", "3.5 0 0 0 0 -1000.0 4.0"))
        lines += ["  " + head, "    T 200 1000 6000", "    LOW " + poly, "    HIGH " + poly]
    lines += ["END", "REACTIONS"] + ["  " + r for r in reactions] + ["END"]
    return parse_mechanism("\n".join(lines))


def methane_case(T0=1400.0, P_atm=20.0, phi=0.5, dt=5e-7, t_end=4e-4, case_id="ch4"):
    return CaseSpec.make(case_id, T0, P_atm, phi, {"CH4": 1.0}, AIR, dt, t_end)


def _trajectory(mech, case):
    from skelred.fom import integrate_state

    return integrate_state(mech, case.initial_state(mech), case.dt, case.t_end)


@pytest.fixture(scope="session")
def methane_trajectory(methane):
    return _trajectory(methane, methane_case())


@pytest.fixture(scope="session")
def gri30_trajectory(gri30):
    return _trajectory(gri30, methane_case())


@pytest.fixture(scope="session")
def h2_case_result(h2o2, h2_case):
    """Rank-7 low-rank run on the hydrogen case with the full-order reference."""
    from skelred.harness import run_case

    t0 = time.perf_counter()
    res = run_case(h2o2, h2_case, 7)
    BUILD_TIME["h2_case_result"] = time.perf_counter() - t0
    return res


@pytest.fixture(scope="session")
def h2_elimination(h2o2, h2_case):
    from oracles import elimination_importance

    t0 = time.perf_counter()
    out = elimination_importance(h2o2, h2_case)
    BUILD_TIME["h2_elimination"] = time.perf_counter() - t0
    return out
