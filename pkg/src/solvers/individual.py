# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Individual optimal distancing against a given epidemic, and its Nash closure.

An individual chooses its contact level kappa while the population fractions s, i and the
intervention eps are taken as given. At the Nash equilibrium the population behaviour k
equals kappa, so the individual's state probabilities coincide with s and i.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid

from exceptions import InvalidSpecError
from solvers.dynamics import (
    CostProfile,
    EpidemicParams,
    Series,
    Trajectory,
    as_series,
    check_fractions,
    discount,
    horizon_ok,
    infection_cost,
    integrate_sir,
    linear_coefficients,
    rk4_linear,
    salvage_coefficient,
)
from solvers.sweep import SweepSettings, forward_backward_sweep

logger = logging.getLogger(__name__)

__all__ = [
    "IndividualSolution",
    "SweepSettings",
    "control_rule",
    "evaluate_strategy",
    "individual_gradient",
    "integrate_costates_individual",
    "integrate_exposure",
    "solve_best_response",
    "solve_nash",
    "stationarity_residual",
    "unclamped_rule",
    "utility",
]


@dataclass(frozen=True)
class IndividualSolution:
    """Converged individual problem.

    For a Nash solution ``traj.k`` is the equilibrium behaviour; for a best response it is the
    individual's own behaviour and ``traj.psi_s``/``traj.psi_i`` hold its state probabilities.
    """

    traj: Trajectory
    utility: float
    iterations: int
    converged: bool
    residual: float

    @property
    def horizon_ok(self) -> bool:
        """Return True if i(t_f) is below the salvage threshold."""
        return horizon_ok(self.traj)


def unclamped_rule(vs, vi, psi_s, i, eps, t, c: CostProfile, kappa_star: float):
    """Return the stationary contact level before the non-negativity clamp."""
    growth = 1.0 / discount(t, c.f)
    pressure = growth * (np.asarray(vs) - np.asarray(vi)) * np.asarray(psi_s) * np.asarray(i)
    return kappa_star + (np.asarray(eps) - pressure) / (2 * c.beta)


def control_rule(vs, vi, s, i, eps, t, c: CostProfile, kappa_star: float):
    """Return kappa = max(0, kappa* - f^t (vs - vi) s i / 2 beta + eps / 2 beta).

    Args:
        vs: costate of the susceptible state
        vi: costate of the infected state
        s: individual's susceptible probability (population s at the Nash point)
        i: population infected fraction
        eps: intervention
        t: time
        c: individual preferences
        kappa_star: baseline contact level
    """
    return np.maximum(0.0, unclamped_rule(vs, vi, s, i, eps, t, c, kappa_star))


def integrate_costates_individual(
    traj: Trajectory, p: EpidemicParams, c: CostProfile, kappa: Optional[Series] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Integrate the individual costates backward from their terminal values.

    vs' = (vs - vi) kappa i and vi' = f^-t alpha(i) + vi, with vs(t_f) = 0 and vi(t_f) the
    salvage coefficient.

    Args:
        traj: trajectory carrying the population i and, unless kappa is given, the behaviour
        p: epidemic parameters
        c: individual preferences
        kappa: the individual's own behaviour, defaults to traj.k

    Returns:
        (vs, vi) on the grid
    """
    own = traj.k if kappa is None else as_series(kappa, p, name="kappa")

    def system(t, kap, inf):
        rate = kap * inf
        forcing = discount(t, c.f) * infection_cost(inf, c)
        return linear_coefficients([[rate, -rate], [0.0, 1.0]], [0.0, forcing], len(t))

    vs, vi = rk4_linear(
        system, (0.0, salvage_coefficient(p.t_f, c)), traj.t, (own, traj.i), backward=True
    )
    return vs, vi


def integrate_exposure(
    kappa: Series, i: np.ndarray, p: EpidemicParams
) -> Tuple[np.ndarray, np.ndarray]:
    """Integrate the individual's state probabilities against an exogenous epidemic.

    psi_s' = -kappa psi_s i and psi_i' = kappa psi_s i - psi_i from the population initial values.
    """
    own = as_series(kappa, p, name="kappa")

    def system(t, kap, inf):
        rate = kap * inf
        return linear_coefficients([[-rate, 0.0], [rate, -1.0]], [0.0, 0.0], len(t))

    t = p.grid
    psi_s, psi_i = rk4_linear(system, (1.0 - p.i0, p.i0), t, (own, np.asarray(i, dtype=float)))
    check_fractions(t, (psi_s, psi_i))
    return psi_s, psi_i


def utility(
    traj: Trajectory,
    p: EpidemicParams,
    c: CostProfile,
    kappa: Optional[Series] = None,
    psi_i: Optional[np.ndarray] = None,
) -> float:
    """Return the discounted utility of an individual including the salvage term.

    The integrand f^-t [-alpha(i) psi_i - beta (kappa - kappa*)^2 + (kappa - kappa*) eps] is
    integrated with the trapezoidal rule. Without an explicit kappa or psi_i the trajectory's
    own behaviour and state probabilities are used, which at the Nash point are k, s and i.
    """
    own = traj.k if kappa is None else as_series(kappa, p, name="kappa")
    infected = traj.exposure_i if psi_i is None else np.asarray(psi_i, dtype=float)
    excess = own - p.kappa_star
    rate = -infection_cost(traj.i, c) * infected - c.beta * excess**2 + excess * traj.eps
    running = trapezoid(discount(traj.t, c.f) * rate, traj.t)
    return float(running + salvage_coefficient(p.t_f, c) * infected[-1])


def individual_gradient(
    traj: Trajectory, p: EpidemicParams, c: CostProfile, kappa: Optional[Series] = None
) -> np.ndarray:
    """Return dH/dkappa = -f^-t [2 beta (kappa - kappa*) - eps] - (vs - vi) psi_s i on the grid.

    The trajectory must carry the costates belonging to kappa.
    """
    if traj.vs is None or traj.vi is None:
        raise InvalidSpecError("individual_gradient needs a trajectory with costates")
    own = traj.k if kappa is None else as_series(kappa, p, name="kappa")
    return (
        -discount(traj.t, c.f) * (2 * c.beta * (own - p.kappa_star) - traj.eps)
        - (traj.vs - traj.vi) * traj.exposure_s * traj.i
    )


def stationarity_residual(gradient: np.ndarray, kappa: np.ndarray) -> Tuple[float, float]:
    """Return the first-order optimality violations of a clamped control.

    Returns:
        (sup |dH/dkappa| where kappa > 0, sup max(dH/dkappa, 0) where kappa == 0)
    """
    gradient = np.asarray(gradient, dtype=float)
    interior = np.asarray(kappa) > 0
    free = float(np.max(np.abs(gradient[interior]))) if interior.any() else 0.0
    clamped = ~interior
    slack = float(np.max(np.maximum(gradient[clamped], 0.0))) if clamped.any() else 0.0
    return free, slack


def evaluate_strategy(
    kappa: Series, traj: Trajectory, p: EpidemicParams, c: CostProfile
) -> float:
    """Return the utility of an arbitrary strategy kappa against the epidemic in traj.

    The population series s, i and eps of traj stay fixed; only the individual deviates.
    """
    own = as_series(kappa, p, name="kappa")
    if np.any(own < 0):
        raise InvalidSpecError("a strategy must be non-negative on the grid")
    psi_s, psi_i = integrate_exposure(own, traj.i, p)
    deviant = traj.with_series(k=own, psi_s=psi_s, psi_i=psi_i)
    return utility(deviant, p, c)


def _clamp(control: np.ndarray) -> np.ndarray:
    return np.maximum(control, 0.0)


def solve_best_response(
    eps: Series,
    s: Series,
    i: Series,
    p: EpidemicParams,
    c: CostProfile,
    sweep: Optional[SweepSettings] = None,
    initial: Optional[Series] = None,
) -> IndividualSolution:
    """Find the individual's optimal behaviour against an exogenous epidemic.

    Args:
        eps: intervention on the grid, or a constant
        s: population susceptible fraction on the grid
        i: population infected fraction on the grid
        p: epidemic parameters
        c: individual preferences
        sweep: sweep settings, module defaults if omitted
        initial: initial behaviour, kappa* if omitted

    Raises:
        ConvergenceError: if the sweep does not converge
    """
    sweep = sweep or SweepSettings()
    t = p.grid
    incentive = as_series(eps, p, name="eps")
    population = Trajectory(
        t=t,
        s=as_series(s, p, name="s"),
        i=as_series(i, p, name="i"),
        k=np.full(len(t), p.kappa_star),
        eps=incentive,
    )

    def solve_states(kappa):
        psi_s, psi_i = integrate_exposure(kappa, population.i, p)
        vs, vi = integrate_costates_individual(population, p, c, kappa=kappa)
        return population.with_series(k=kappa, psi_s=psi_s, psi_i=psi_i, vs=vs, vi=vi)

    def evaluate(kappa):
        traj = solve_states(kappa)
        proposal = control_rule(
            traj.vs, traj.vi, traj.psi_s, traj.i, incentive, t, c, p.kappa_star
        )
        return proposal, traj

    start = np.full(len(t), p.kappa_star)
    if initial is not None:
        start = as_series(initial, p, name="initial")
    result = forward_backward_sweep(evaluate, start, sweep, project=_clamp, name="best response")
    traj = solve_states(result.proposal)
    return IndividualSolution(
        traj=traj,
        utility=utility(traj, p, c),
        iterations=result.iterations,
        converged=True,
        residual=result.residual,
    )


def solve_nash(
    eps: Series,
    p: EpidemicParams,
    c: CostProfile,
    sweep: Optional[SweepSettings] = None,
    initial_k: Optional[Series] = None,
) -> IndividualSolution:
    """Find the Nash equilibrium behaviour for a given intervention.

    Each iteration integrates the population epidemic under the current k, integrates the
    individual costates with kappa = k and proposes k from the control rule. The converged
    behaviour is snapped onto the clamped proposal and the states are recomputed once, so
    the returned costates belong to the returned behaviour.

    Args:
        eps: intervention on the grid, or a constant
        p: epidemic parameters
        c: individual preferences
        sweep: sweep settings, module defaults if omitted
        initial_k: warm start for the behaviour, kappa* if omitted

    Raises:
        ConvergenceError: if the sweep does not converge
        IntegrationError: if the epidemic leaves its admissible range
    """
    sweep = sweep or SweepSettings()
    t = p.grid
    incentive = as_series(eps, p, name="eps")

    def solve_states(k):
        traj = integrate_sir(k, p).with_series(eps=incentive)
        vs, vi = integrate_costates_individual(traj, p, c)
        return traj.with_series(vs=vs, vi=vi)

    def evaluate(k):
        traj = solve_states(k)
        proposal = control_rule(traj.vs, traj.vi, traj.s, traj.i, incentive, t, c, p.kappa_star)
        return proposal, traj

    start = np.full(len(t), p.kappa_star)
    if initial_k is not None:
        start = as_series(initial_k, p, name="initial_k")
    result = forward_backward_sweep(evaluate, start, sweep, project=_clamp, name="nash")
    traj = solve_states(result.proposal)
    return IndividualSolution(
        traj=traj,
        utility=utility(traj, p, c),
        iterations=result.iterations,
        converged=True,
        residual=result.residual,
    )
