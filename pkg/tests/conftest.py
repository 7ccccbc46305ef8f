import os
import sys
import warnings

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from fldata.basis import perturbed_pendulum_dictionary  # noqa: E402
from fldata.plant import (DoublePendulum, PendulumParams, PrestabilizingController,  # noqa: E402
                          collect_data, default_box)


@pytest.fixture(autouse=True)
def _quiet_validation_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*validation points exceed.*")
        yield


@pytest.fixture(scope="session")
def true_params():
    return PendulumParams()


@pytest.fixture(scope="session")
def nominal_data(true_params):
    """Noiseless N=500 closed-loop data from the benchmark plant."""
    ctrl = PrestabilizingController(model=true_params.perturbed(0.05, np.random.default_rng(1)))
    return collect_data(DoublePendulum(true_params), ctrl, 500, 0.0, 0, default_box())


@pytest.fixture(scope="session")
def exact_dictionary(true_params):
    return perturbed_pendulum_dictionary(true_params)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
