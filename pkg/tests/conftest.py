import numpy as np
import pytest

from bipedtune import srbm
from bipedtune.closed_loop import SimSetup
from bipedtune.mpc import MpcConfig, MpcTheta
from bipedtune.srbm import RobotParams

# acceptance results collected during the session, printed in the terminal summary
ACCEPTANCE = {}


def record_acceptance(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"CRITERION {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def params():
    return RobotParams()


@pytest.fixture
def setup():
    return SimSetup()


@pytest.fixture
def theta():
    return MpcTheta.nominal()


@pytest.fixture
def mpc_cfg():
    return MpcConfig()


def random_state(rng, params=None, tilt=0.3):
    """A plausible state with |roll|, |pitch| < tilt."""
    return srbm.make_state(euler=rng.uniform(-tilt, tilt, 3) * np.r_[1, 1, 10],
                           com_pos=rng.normal(0, 0.3, 3) + np.r_[0, 0, 0.55],
                           ang_vel=rng.normal(0, 0.5, 3), com_vel=rng.normal(0, 0.5, 3),
                           params=params)


def random_feet(rng, x, stance=(True, True)):
    feet = x[srbm.POS] + rng.normal(0, 0.1, (2, 3))
    feet[:, 2] = 0.0
    return srbm.FootConfig(feet, stance)


def rel_err(a, b, floor=0.0):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), floor, 1e-300))
