# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Full-resolution fixtures shared by the acceptance checks."""

import pytest

from solvers.dynamics import CostProfile, EpidemicParams, integrate_sir
from solvers.individual import solve_nash
from solvers.sweep import SweepSettings
from solvers.utilitarian import solve_utilitarian


@pytest.fixture(scope="session")
def full() -> EpidemicParams:
    return EpidemicParams()


@pytest.fixture(scope="session")
def constant_400() -> CostProfile:
    return CostProfile.constant(400.0)


@pytest.fixture(scope="session")
def baseline(full):
    return integrate_sir(full.kappa_star, full)


@pytest.fixture(scope="session")
def nash_400(full, constant_400):
    return solve_nash(0.0, full, constant_400, SweepSettings(tol=1e-10))


@pytest.fixture(scope="session")
def utilitarian_400(full, constant_400):
    return solve_utilitarian(0.0, full, constant_400, SweepSettings(tol=1e-10))
