# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Optimal government incentive on top of the incentivised Nash equilibrium.

The government controls the intervention eps. Individuals respond through their Nash
equilibrium, so every outer iteration solves an inner Nash problem at the current eps. The
government's own costates ls, li then propose a new eps from the closed-form rule.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from exceptions import ConvergenceError, ErrorWithExitCode, InvalidSpecError
from solvers.dynamics import (
    CostProfile,
    EpidemicParams,
    Series,
    Trajectory,
    as_series,
    discount,
    horizon_ok,
    infection_cost,
    linear_coefficients,
    marginal_infection_cost,
    peak_value,
    rk4_linear,
    salvage_coefficient,
)
from solvers.individual import IndividualSolution, solve_nash
from solvers.sweep import SweepSettings, forward_backward_sweep

logger = logging.getLogger(__name__)

HIGH_PEAK = "high-peak"
THRESHOLD_TRACKING = "threshold-tracking"
# peak above (1 + margin) i_hc counts as the high-peak branch
BRANCH_MARGIN = 0.2
# two starts are distinct optima above this sup-norm distance of k
DISTINCT_OPTIMA_TOL = 1e-3
# alpha_g1 of the warm-start solve, as a multiple of alpha_g0
TRACKING_FACTOR = 10.0
STARTS = ("zero", "warm")

INNER_CLAMP_FLAG = "inner-clamp-active"
HORIZON_FLAG = "horizon-too-short"


@dataclass(frozen=True)
class GovernmentPreferences:
    """Government objective preferences.

    The cost profile carries alpha_g0, alpha_g1, beta_g, f_g and gamma_g. By default the
    government shares i_hc and sigma with the individuals.
    """

    cost: CostProfile

    def __post_init__(self):
        """Validate the denominator of the intervention rule."""
        if not self.cost.beta + 2 * self.cost.gamma > 0:
            raise InvalidSpecError("beta_g + 2 gamma_g must be > 0")

    @classmethod
    def aligned(cls, c: CostProfile, gamma: float = 0.0) -> "GovernmentPreferences":
        """Return preferences equal to the individuals' with an intervention cost gamma."""
        return cls(cost=replace(c, gamma=gamma))

    @classmethod
    def from_individual(
        cls,
        c: CostProfile,
        alpha0: Optional[float] = None,
        alpha1: Optional[float] = None,
        beta: Optional[float] = None,
        f: Optional[float] = None,
        gamma: float = 0.0,
    ) -> "GovernmentPreferences":
        """Return preferences sharing i_hc and sigma with c, overriding the rest."""
        return cls(
            cost=replace(
                c,
                alpha0=c.alpha0 if alpha0 is None else alpha0,
                alpha1=c.alpha1 if alpha1 is None else alpha1,
                beta=c.beta if beta is None else beta,
                f=c.f if f is None else f,
                gamma=gamma,
            )
        )

    @property
    def gamma(self) -> float:
        """Return the intervention cost coefficient gamma_g."""
        return self.cost.gamma

    def to_dict(self) -> dict:
        """Return the preferences as a plain dictionary."""
        return self.cost.to_dict()


@dataclass(frozen=True)
class StartOutcome:
    """Result of one start of the government multi-start."""

    label: str
    value: Optional[float] = None
    branch: Optional[str] = None
    peak_i: Optional[float] = None
    iterations: int = 0
    converged: bool = False
    error: Optional[str] = None
    k: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        """Return the outcome without the behaviour series."""
        data = asdict(self)
        data.pop("k")
        return data


@dataclass(frozen=True)
class GovernmentSolution:
    """Best converged start of the government problem."""

    traj: Trajectory
    value: float
    inner_solution: IndividualSolution
    branch: str
    starts: Tuple[StartOutcome, ...]
    n_local_optima: int
    flags: Tuple[str, ...]
    iterations: int
    residual: float

    @property
    def start_values(self) -> Dict[str, Optional[float]]:
        """Return the objective value reached by each start."""
        return {outcome.label: outcome.value for outcome in self.starts}

    @property
    def horizon_ok(self) -> bool:
        """Return True if i(t_f) is below the salvage threshold."""
        return horizon_ok(self.traj)


def classify_branch(peak_i: float, i_hc: float) -> str:
    """Return the branch label of a government solution with the given peak."""
    return HIGH_PEAK if peak_i > (1.0 + BRANCH_MARGIN) * i_hc else THRESHOLD_TRACKING


def government_value(traj: Trajectory, p: EpidemicParams, gp: GovernmentPreferences) -> float:
    """Return the government objective V including the salvage term.

    The integrand is f_g^-t [-alpha_g(i) i - beta_g (k - kappa*)^2 - gamma_g eps (k - kappa*)].
    """
    g = gp.cost
    excess = traj.k - p.kappa_star
    rate = -infection_cost(traj.i, g) * traj.i - g.beta * excess**2 - g.gamma * traj.eps * excess
    running = trapezoid(discount(traj.t, g.f) * rate, traj.t)
    return float(running + salvage_coefficient(p.t_f, g) * traj.i[-1])


def integrate_costates_government(
    traj: Trajectory, p: EpidemicParams, c: CostProfile, gp: GovernmentPreferences
) -> Tuple[np.ndarray, np.ndarray]:
    """Integrate the government costates backward from their terminal values.

    ls' = i L and li' = s L + f_g^-t [alpha_g(i) + alpha_g'(i) i] + li, where L collects the
    response of the individuals' rule to s and i:
    L = f_g^-t [2 beta_g (k_r - kappa*) + gamma_g eps] (-f^t D / 2 beta)
        + (ls - li) (k_r - f^t D s i / 2 beta)
    with D = vs - vi and k_r the unclamped individual rule.

    Args:
        traj: inner Nash trajectory carrying s, i, eps, vs and vi
        p: epidemic parameters
        c: individual preferences
        gp: government preferences

    Returns:
        (ls, li) on the grid
    """
    if traj.vs is None or traj.vi is None:
        raise InvalidSpecError("government costates need the individual costates")
    g = gp.cost
    f, beta, kappa_star = c.f, c.beta, p.kappa_star

    def system(t, s, inf, eps, gap):
        growth = np.power(f, t)
        pressure = growth * gap * s * inf / (2 * beta)
        k_r = kappa_star - pressure + eps / (2 * beta)
        weight = discount(t, g.f)
        marginal_k = -growth * gap / (2 * beta)
        response = weight * (2 * g.beta * (k_r - kappa_star) + g.gamma * eps) * marginal_k
        rate = k_r - pressure
        forcing = weight * marginal_infection_cost(inf, g)
        return linear_coefficients(
            [[inf * rate, -inf * rate], [s * rate, 1.0 - s * rate]],
            [inf * response, s * response + forcing],
            len(t),
        )

    ls, li = rk4_linear(
        system,
        (0.0, salvage_coefficient(p.t_f, g)),
        traj.t,
        (traj.s, traj.i, traj.eps, traj.vs - traj.vi),
        backward=True,
    )
    return ls, li


def intervention_rule(vs, vi, ls, li, s, i, t, c: CostProfile, gp: GovernmentPreferences):
    """Return the stationary intervention of the government.

    eps = i s [f^t (beta_g + beta gamma_g) D - beta f_g^t (ls - li)] / (beta_g + 2 beta gamma_g)
    with D = vs - vi. At beta = 1 this reduces to the unit distancing cost rule.
    """
    g = gp.cost
    denominator = g.beta + 2 * c.beta * g.gamma
    if not denominator > 0:
        raise InvalidSpecError("beta_g + 2 beta gamma_g must be > 0")
    t = np.asarray(t, dtype=float)
    gap = np.asarray(vs) - np.asarray(vi)
    shadow = np.asarray(ls) - np.asarray(li)
    numerator = (g.beta + c.beta * g.gamma) * gap / discount(t, c.f)
    numerator = numerator - c.beta * shadow / discount(t, g.f)
    return np.asarray(i) * np.asarray(s) * numerator / denominator


def clamped_measure(traj: Trajectory) -> float:
    """Return the time measure of the set where the behaviour is clamped at zero."""
    idle = traj.k <= 0
    both = idle[:-1] & idle[1:]
    return float(np.sum(np.diff(traj.t)[both]))


def _solve_from(
    label: str,
    initial_eps: np.ndarray,
    p: EpidemicParams,
    c: CostProfile,
    gp: GovernmentPreferences,
    sweep_outer: SweepSettings,
    sweep_inner: SweepSettings,
):
    """Run the nested sweep from one initial intervention."""
    warm = {"k": None}

    def solve_states(eps):
        inner = solve_nash(eps, p, c, sweep_inner, initial_k=warm["k"])
        warm["k"] = inner.traj.k
        ls, li = integrate_costates_government(inner.traj, p, c, gp)
        return inner, inner.traj.with_series(ls=ls, li=li)

    def evaluate(eps):
        inner, traj = solve_states(eps)
        proposal = intervention_rule(
            traj.vs, traj.vi, traj.ls, traj.li, traj.s, traj.i, traj.t, c, gp
        )
        return proposal, (inner, traj)

    result = forward_backward_sweep(
        evaluate, initial_eps, sweep_outer, name=f"government[{label}]"
    )
    inner, traj = result.state
    return inner, traj, result


def tracking_preferences(gp: GovernmentPreferences) -> GovernmentPreferences:
    """Return cost-free preferences with alpha_g1 = TRACKING_FACTOR alpha_g0 at the same i_hc."""
    g = gp.cost
    return GovernmentPreferences(cost=replace(g, gamma=0.0, alpha1=TRACKING_FACTOR * g.alpha0))


@lru_cache(maxsize=32)
def tracking_warm_start(
    p: EpidemicParams,
    c: CostProfile,
    steep: GovernmentPreferences,
    sweep_outer: SweepSettings,
    sweep_inner: SweepSettings,
) -> np.ndarray:
    """Return the converged intervention of a threshold-tracking government.

    ``steep`` is normally built by tracking_preferences, so every point of a scan over
    alpha_g1 or gamma_g shares one cached solve.
    """
    logger.info(
        "computing tracking warm start (alpha_g1=%.6g, i_hc=%.6g)",
        steep.cost.alpha1,
        steep.cost.i_hc,
    )
    _, traj, _ = _solve_from(
        "tracking", np.zeros(int(p.n_grid)), p, c, steep, sweep_outer, sweep_inner
    )
    eps = np.array(traj.eps)
    eps.setflags(write=False)
    return eps


def solve_government(
    p: EpidemicParams,
    c: CostProfile,
    gp: GovernmentPreferences,
    sweep_outer: Optional[SweepSettings] = None,
    sweep_inner: Optional[SweepSettings] = None,
    starts: Sequence[str] = STARTS,
    warm_start: Optional[Series] = None,
) -> GovernmentSolution:
    """Find the optimal intervention by a nested forward-backward sweep from several starts.

    Args:
        p: epidemic parameters
        c: individual preferences
        gp: government preferences
        sweep_outer: settings of the sweep over eps
        sweep_inner: settings of the inner Nash sweeps
        starts: any of "zero" (eps = 0) and "warm" (threshold-tracking warm start)
        warm_start: explicit eps for the "warm" start, computed if omitted

    Returns:
        the converged start with the highest objective value

    Raises:
        ConvergenceError: if no start converges
    """
    sweep_outer = sweep_outer or SweepSettings.outer()
    sweep_inner = sweep_inner or SweepSettings()
    if not starts:
        raise InvalidSpecError("at least one start is required")
    unknown = [label for label in starts if label not in STARTS]
    if unknown:
        raise InvalidSpecError(f"unknown starts {unknown}, expected any of {list(STARTS)}")
    if not gp.cost.beta + 2 * c.beta * gp.cost.gamma > 0:
        raise InvalidSpecError("beta_g + 2 beta gamma_g must be > 0")

    i_hc = gp.cost.i_hc
    outcomes = []
    solved = {}
    for label in starts:
        try:
            if label == "zero":
                initial = np.zeros(int(p.n_grid))
            elif warm_start is not None:
                initial = as_series(warm_start, p, name="warm_start")
            else:
                steep = tracking_preferences(gp)
                initial = np.array(
                    tracking_warm_start(p, c, steep, sweep_outer, sweep_inner)
                )
            inner, traj, result = _solve_from(label, initial, p, c, gp, sweep_outer, sweep_inner)
        except ErrorWithExitCode as err:
            logger.warning("government start '%s' failed: %s", label, err.msg)
            outcomes.append(StartOutcome(label=label, error=err.msg))
            continue

        value = government_value(traj, p, gp)
        peak = peak_value(traj.i)
        outcome = StartOutcome(
            label=label,
            value=value,
            branch=classify_branch(peak, i_hc),
            peak_i=peak,
            iterations=result.iterations,
            converged=True,
            k=traj.k,
        )
        logger.info(
            "government start '%s': V=%.8g, peak_i=%.6g, branch %s, %d outer iterations",
            label,
            value,
            peak,
            outcome.branch,
            result.iterations,
        )
        outcomes.append(outcome)
        solved[label] = (inner, traj, result)

    converged = [outcome for outcome in outcomes if outcome.converged]
    if not converged:
        raise ConvergenceError(
            "government: no start converged ("
            + "; ".join(f"{o.label}: {o.error}" for o in outcomes)
            + ")",
            residual=float("nan"),
            iterations=0,
        )

    best = max(converged, key=lambda outcome: outcome.value)
    inner, traj, result = solved[best.label]

    optima = []
    for outcome in converged:
        if all(np.max(np.abs(outcome.k - other.k)) > DISTINCT_OPTIMA_TOL for other in optima):
            optima.append(outcome)

    flags = []
    if clamped_measure(traj) > 0:
        logger.warning("inner clamp k = 0 is active; the intervention rule assumes interior k")
        flags.append(INNER_CLAMP_FLAG)
    if not horizon_ok(traj):
        flags.append(HORIZON_FLAG)

    return GovernmentSolution(
        traj=traj,
        value=best.value,
        inner_solution=inner,
        branch=best.branch,
        starts=tuple(outcomes),
        n_local_optima=len(optima),
        flags=tuple(flags),
        iterations=result.iterations,
        residual=result.residual,
    )
