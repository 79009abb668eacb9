# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

import numpy as np
import pytest
from hypothesis import settings

from solvers.dynamics import CostProfile, EpidemicParams, integrate_sir
from solvers.individual import solve_nash
from solvers.sweep import SweepSettings

settings.register_profile("unit", max_examples=25, deadline=None)
settings.load_profile("unit")


@pytest.fixture(scope="session")
def coarse() -> EpidemicParams:
    """Default epidemic on a grid fine enough for 1e-4 level checks."""
    return EpidemicParams(n_grid=2001)


@pytest.fixture(scope="session")
def rough() -> EpidemicParams:
    """Default epidemic on the cheapest grid that still resolves the peak."""
    return EpidemicParams(n_grid=501)


@pytest.fixture(scope="session")
def constant_400() -> CostProfile:
    return CostProfile.constant(400.0)


@pytest.fixture(scope="session")
def baseline(coarse):
    return integrate_sir(coarse.kappa_star, coarse)


@pytest.fixture(scope="session")
def nash_400(coarse, constant_400):
    """Nash equilibrium for a constant infection cost of 400, shared by several modules."""
    return solve_nash(0.0, coarse, constant_400, SweepSettings())


@pytest.fixture(scope="function")
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def constant_100() -> CostProfile:
    return CostProfile.constant(100.0)


@pytest.fixture(scope="session")
def nash_100(coarse, constant_100):
    """Nash equilibrium at a cost low enough for the best response to be locally concave."""
    return solve_nash(0.0, coarse, constant_100, SweepSettings())


@pytest.fixture(scope="function")
def bumps(rng):
    """Return a factory of smooth perturbations localized at random times."""

    def make(t, count=5):
        centres = rng.uniform(0.1 * t[-1], 0.9 * t[-1], size=count)
        widths = rng.uniform(0.5, 3.0, size=count)
        return [np.exp(-(((t - c) / w) ** 2)) for c, w in zip(centres, widths)]

    return make
