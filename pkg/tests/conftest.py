from math import sqrt

import numpy as np
import pytest
from hypothesis import settings

from jpmreadout.model import SystemParams
from jpmreadout.protocol import run_full_protocol

settings.register_profile("jpm", deadline=None, max_examples=50)
settings.load_profile("jpm")

PLUS = (1 / sqrt(2), 1 / sqrt(2))

# criterion number -> (passed, line); filled by test_acceptance
ACCEPTANCE = {}


def record_criterion(number, passed, text):
    ACCEPTANCE[number] = (bool(passed), text)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {text}")


@pytest.fixture(scope="session")
def default_runs():
    """Full dispersive protocol at default parameters for |0>, |1> and |+>."""
    p = SystemParams()
    return {k: run_full_protocol(p, q) for k, q in (("0", (1.0, 0.0)), ("1", (0.0, 1.0)), ("+", PLUS))}


@pytest.fixture(scope="session")
def ideal_params():
    """No dark counts or relaxation; measurement long enough to saturate."""
    return SystemParams(gamma_d=0.0, gamma_r=0.0, bright_photons=10.0, t_m=100e-9)


@pytest.fixture(scope="session")
def ideal_plus_run(ideal_params):
    return run_full_protocol(ideal_params, PLUS, reset=False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
