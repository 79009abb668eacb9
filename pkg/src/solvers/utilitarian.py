# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Cooperative population optimum.

The population chooses k to maximise the aggregate utility. The decision rule is the
individual one; only the costates change, because the population internalises the effect of
its behaviour on the epidemic and on the infection cost.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from exceptions import InvalidSpecError
from solvers.dynamics import (
    CostProfile,
    EpidemicParams,
    Series,
    Trajectory,
    as_series,
    discount,
    horizon_ok,
    infection_cost,
    integrate_sir,
    linear_coefficients,
    marginal_infection_cost,
    rk4_linear,
    salvage_coefficient,
)
from solvers.individual import control_rule, solve_nash, utility
from solvers.sweep import SweepSettings, forward_backward_sweep

logger = logging.getLogger(__name__)

# two starts count as the same optimum below this sup-norm distance of k
STARTS_AGREE_TOL = 1e-3


@dataclass(frozen=True)
class UtilitarianSolution:
    """Converged cooperative optimum.

    ``starts_agree`` is None unless the two-start check ran.
    """

    traj: Trajectory
    utility: float
    iterations: int
    converged: bool
    residual: float
    starts_agree: Optional[bool] = None

    @property
    def horizon_ok(self) -> bool:
        """Return True if i(t_f) is below the salvage threshold."""
        return horizon_ok(self.traj)


def integrate_costates_utilitarian(
    traj: Trajectory, p: EpidemicParams, c: CostProfile
) -> Tuple[np.ndarray, np.ndarray]:
    """Integrate the population costates backward from their terminal values.

    vs' = (vs - vi) k i and vi' = f^-t [alpha(i) + alpha'(i) i] + (vs - vi) k s + vi, with
    vs(t_f) = 0 and vi(t_f) the salvage coefficient.
    """

    def system(t, k, s, inf):
        forcing = discount(t, c.f) * marginal_infection_cost(inf, c)
        return linear_coefficients(
            [[k * inf, -k * inf], [k * s, 1.0 - k * s]], [0.0, forcing], len(t)
        )

    vs, vi = rk4_linear(
        system,
        (0.0, salvage_coefficient(p.t_f, c)),
        traj.t,
        (traj.k, traj.s, traj.i),
        backward=True,
    )
    return vs, vi


def population_utility(traj: Trajectory, p: EpidemicParams, c: CostProfile) -> float:
    """Return the aggregate utility of the population behaviour in traj."""
    return utility(traj, p, c, kappa=traj.k, psi_i=traj.i)


def utilitarian_hamiltonian(traj: Trajectory, p: EpidemicParams, c: CostProfile) -> np.ndarray:
    """Return the population Hamiltonian on the grid.

    H = -f^-t [alpha(i) i + beta (k - kappa*)^2 - eps (k - kappa*)] - (vs - vi) k s i - vi i
    """
    return sum(_hamiltonian_terms(traj, p, c))


def _hamiltonian_terms(traj: Trajectory, p: EpidemicParams, c: CostProfile):
    if traj.vs is None or traj.vi is None:
        raise InvalidSpecError("the population Hamiltonian needs a trajectory with costates")
    weight = discount(traj.t, c.f)
    excess = traj.k - p.kappa_star
    return (
        -weight * infection_cost(traj.i, c) * traj.i,
        -weight * c.beta * excess**2,
        weight * traj.eps * excess,
        -(traj.vs - traj.vi) * traj.k * traj.s * traj.i,
        -traj.vi * traj.i,
    )


def hamiltonian_drift(traj: Trajectory, p: EpidemicParams, c: CostProfile) -> float:
    """Return (max H - min H) relative to the largest Hamiltonian term magnitude.

    H itself is close to zero along an extremal, so it cannot serve as its own scale. The
    drift only measures conservation when f = 1.
    """
    terms = _hamiltonian_terms(traj, p, c)
    hamiltonian = sum(terms)
    scale = max(float(np.max(np.abs(term))) for term in terms)
    if scale == 0.0:
        return 0.0
    return float(np.max(hamiltonian) - np.min(hamiltonian)) / scale


def _solve_cooperative(
    incentive: np.ndarray,
    p: EpidemicParams,
    c: CostProfile,
    sweep: SweepSettings,
    start: np.ndarray,
) -> UtilitarianSolution:
    t = p.grid

    def solve_states(k):
        traj = integrate_sir(k, p).with_series(eps=incentive)
        vs, vi = integrate_costates_utilitarian(traj, p, c)
        return traj.with_series(vs=vs, vi=vi)

    def evaluate(k):
        traj = solve_states(k)
        proposal = control_rule(traj.vs, traj.vi, traj.s, traj.i, incentive, t, c, p.kappa_star)
        return proposal, traj

    result = forward_backward_sweep(
        evaluate, start, sweep, project=lambda k: np.maximum(k, 0.0), name="utilitarian"
    )
    traj = solve_states(result.proposal)
    return UtilitarianSolution(
        traj=traj,
        utility=population_utility(traj, p, c),
        iterations=result.iterations,
        converged=True,
        residual=result.residual,
    )


def solve_utilitarian(
    eps: Series,
    p: EpidemicParams,
    c: CostProfile,
    sweep: Optional[SweepSettings] = None,
    initial_k: Optional[Series] = None,
    check_starts: bool = False,
) -> UtilitarianSolution:
    """Find the behaviour maximising the aggregate population utility.

    Args:
        eps: intervention on the grid, or a constant
        p: epidemic parameters
        c: population preferences
        sweep: sweep settings, module defaults if omitted
        initial_k: initial behaviour, kappa* if omitted
        check_starts: also start from the Nash behaviour and report whether both starts
            reach the same optimum; the better of the two is returned

    Raises:
        ConvergenceError: if the sweep does not converge
    """
    sweep = sweep or SweepSettings()
    incentive = as_series(eps, p, name="eps")
    start = np.full(int(p.n_grid), p.kappa_star)
    if initial_k is not None:
        start = as_series(initial_k, p, name="initial_k")

    solution = _solve_cooperative(incentive, p, c, sweep, start)
    logger.debug(
        "utilitarian optimum after %d iterations, U_p = %.8g",
        solution.iterations,
        solution.utility,
    )
    if not check_starts:
        return solution

    nash = solve_nash(incentive, p, c, sweep)
    other = _solve_cooperative(incentive, p, c, sweep, nash.traj.k)
    distance = float(np.max(np.abs(other.traj.k - solution.traj.k)))
    agree = distance <= STARTS_AGREE_TOL
    if not agree:
        logger.warning(
            "utilitarian starts disagree: sup|k_a - k_b| = %.3e, U_p %.8g vs %.8g",
            distance,
            solution.utility,
            other.utility,
        )
    best = other if other.utility > solution.utility else solution
    return UtilitarianSolution(
        traj=best.traj,
        utility=best.utility,
        iterations=solution.iterations + other.iterations,
        converged=True,
        residual=best.residual,
        starts_agree=agree,
    )
