import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from pasa import PropagatorSpec, QoiSpec, assemble, build_buck_converter, build_rc_demo, integrate  # noqa: E402

BUCK_T = 1 / 500
BUCK_PERIODS = 20
BUCK_STEPS = 1000
RC_T = 1e-3
RC_PERIODS = 12
RC_STEPS = 400


@pytest.fixture(scope="session")
def rc():
    circuit = build_rc_demo()
    sys_ = assemble(circuit)
    return circuit, sys_, QoiSpec.node_voltage(sys_, 2)


@pytest.fixture(scope="session")
def rc_forward(rc):
    _, sys_, _ = rc
    spec = PropagatorSpec(steps_per_interval=RC_STEPS * RC_PERIODS)
    return integrate(sys_, np.zeros(sys_.dim), 0.0, RC_PERIODS * RC_T, spec)


@pytest.fixture(scope="session")
def buck():
    circuit = build_buck_converter()
    sys_ = assemble(circuit)
    return circuit, sys_, QoiSpec.node_voltage(sys_, 4)


@pytest.fixture(scope="session")
def buck_forward(buck):
    _, sys_, _ = buck
    spec = PropagatorSpec(steps_per_interval=BUCK_STEPS * BUCK_PERIODS)
    return integrate(sys_, np.zeros(sys_.dim), 0.0, BUCK_PERIODS * BUCK_T, spec)
