import numpy as np
import pytest

import microgrid_fdi as mg

SCEN_SCALE = 2e5
PAPER_ROOTS = np.array([-0.5, -0.1, -1.0])


@pytest.fixture(scope="session")
def grid_mh():
    return mg.table1_grid("mH")


@pytest.fixture(scope="session")
def grid_uh():
    return mg.table1_grid("uH")


@pytest.fixture(scope="session")
def paper_poly():
    return mg.DenominatorPoly.from_roots(PAPER_ROOTS)


@pytest.fixture(scope="session")
def paper_designs(grid_mh, paper_poly):
    """Both filter variants for all three DGs at the literal paper roots."""
    return mg.design_filters(grid_mh, paper_poly)


@pytest.fixture(scope="session")
def scen_suite(grid_mh):
    """The standard scenario-scale diagnosis suite (fast poles)."""
    return mg.build_suite(grid_mh, PAPER_ROOTS * SCEN_SCALE, ts=1e-5, T=20)


@pytest.fixture(scope="session")
def loads_case1():
    return mg.LoadSchedule(steps=(
        ((0.0, 100.0), (0.04, 120.0)),
        ((0.0, 110.0),),
        ((0.0, 140.0), (0.12, 130.0)),
    ))


@pytest.fixture(scope="session")
def faults_case1():
    return mg.FaultSchedule(
        actuator=(mg.ActuatorFault(dg=0, onset=0.06, profile=mg.StepProfile(2.0)),),
        line=(mg.LineFault(line=0, onset=0.08,
                           profile=mg.IncipientProfile(rate=4e-9, final=5000.0)),))
