# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Epidemic state, infection cost, fixed-grid integration and summary metrics.

Time is measured in recovery times. The recovered fraction is never integrated, it is
reconstructed as ``r = 1 - s - i`` wherever it is needed.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from exceptions import IntegrationError, InvalidSpecError

logger = logging.getLogger(__name__)

# i above this value counts towards the epidemic duration
DURATION_THRESHOLD = 1e-4
# i(t_f) must end below this value for the salvage approximation to hold
HORIZON_THRESHOLD = 1e-8
# slack allowed on s and i leaving [0, 1] during integration
STATE_TOLERANCE = 1e-8

Series = Union[float, Sequence[float], np.ndarray]
LinearSystem = Callable[..., Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class EpidemicParams:
    """Parameters of the rescaled SIR epidemic.

    Args:
        kappa_star: baseline infectiousness (basic reproduction number)
        i0: initial infected fraction
        t_f: horizon in recovery-time units
        n_grid: number of uniform grid points on [0, t_f]
    """

    kappa_star: float = 4.0
    i0: float = 3e-8
    t_f: float = 100.0
    n_grid: int = 10001

    def __post_init__(self):
        """Validate the parameter ranges."""
        if not self.kappa_star > 1:
            raise InvalidSpecError(f"kappa_star must be > 1 - got {self.kappa_star}")
        if not 0 < self.i0 < 1:
            raise InvalidSpecError(f"i0 must lie in (0, 1) - got {self.i0}")
        if not self.t_f > 0:
            raise InvalidSpecError(f"t_f must be > 0 - got {self.t_f}")
        if int(self.n_grid) != self.n_grid or self.n_grid < 2:
            raise InvalidSpecError(f"n_grid must be an integer >= 2 - got {self.n_grid}")

    @property
    def grid(self) -> np.ndarray:
        """Return the uniform time grid."""
        return np.linspace(0.0, self.t_f, int(self.n_grid))

    @property
    def step(self) -> float:
        """Return the grid spacing."""
        return self.t_f / (int(self.n_grid) - 1)


@dataclass(frozen=True)
class CostProfile:
    """Preferences entering a utility or objective function.

    The same profile describes individuals and, with ``gamma`` set, a government.
    A constant infection cost is expressed as ``alpha1 == alpha0``.

    Args:
        alpha0: minimum infection cost
        alpha1: maximum infection cost, reached above the healthcare threshold
        i_hc: healthcare threshold as infected fraction
        sigma: steepness of the cost step
        beta: distancing cost coefficient
        f: discount factor per unit time
        gamma: intervention cost coefficient (government role only)
    """

    alpha0: float = 100.0
    alpha1: float = 100.0
    i_hc: float = 0.1
    sigma: float = 300.0
    beta: float = 1.0
    f: float = 1.0
    gamma: float = 0.0

    def __post_init__(self):
        """Validate the parameter ranges."""
        if not self.alpha1 >= self.alpha0 >= 0:
            raise InvalidSpecError(
                f"infection costs must satisfy alpha1 >= alpha0 >= 0 - got "
                f"alpha0={self.alpha0}, alpha1={self.alpha1}"
            )
        if not self.sigma > 0:
            raise InvalidSpecError(f"sigma must be > 0 - got {self.sigma}")
        if not 0 < self.i_hc < 1:
            raise InvalidSpecError(f"i_hc must lie in (0, 1) - got {self.i_hc}")
        if not self.beta > 0:
            raise InvalidSpecError(f"beta must be > 0 - got {self.beta}")
        if not self.f >= 1:
            raise InvalidSpecError(f"discount factor f must be >= 1 - got {self.f}")
        if not self.gamma >= 0:
            raise InvalidSpecError(f"gamma must be >= 0 - got {self.gamma}")

    @classmethod
    def constant(cls, alpha: float, **kwargs) -> "CostProfile":
        """Return a profile whose infection cost does not depend on i."""
        return cls(alpha0=alpha, alpha1=alpha, **kwargs)

    @property
    def is_constant(self) -> bool:
        """Return True if the infection cost does not depend on i."""
        return self.alpha1 == self.alpha0

    def to_dict(self) -> dict:
        """Return the profile as a plain dictionary."""
        return asdict(self)


@dataclass(frozen=True)
class Trajectory:
    """Aligned time series on the shared grid.

    ``k`` holds the behaviour the owning solution prescribes; for a Nash or government
    solution that is the population behaviour. ``psi_s``/``psi_i`` are only set for a best
    response against an exogenous epidemic, ``ls``/``li`` only for government solutions.
    Arrays are stored read-only.
    """

    t: np.ndarray
    s: np.ndarray
    i: np.ndarray
    k: np.ndarray
    eps: np.ndarray
    vs: Optional[np.ndarray] = None
    vi: Optional[np.ndarray] = None
    ls: Optional[np.ndarray] = None
    li: Optional[np.ndarray] = None
    psi_s: Optional[np.ndarray] = None
    psi_i: Optional[np.ndarray] = None

    def __post_init__(self):
        """Freeze the arrays and check that all series share the grid."""
        n = len(self.t)
        for item in fields(self):
            value = getattr(self, item.name)
            if value is None:
                continue
            array = np.array(value, dtype=float)
            if array.shape != (n,):
                raise InvalidSpecError(
                    f"series '{item.name}' has shape {array.shape}, expected ({n},)"
                )
            array.setflags(write=False)
            object.__setattr__(self, item.name, array)

    @property
    def r(self) -> np.ndarray:
        """Return the recovered fraction."""
        return 1.0 - self.s - self.i

    @property
    def exposure_s(self) -> np.ndarray:
        """Return the individual's susceptible probability (population s at Nash)."""
        return self.s if self.psi_s is None else self.psi_s

    @property
    def exposure_i(self) -> np.ndarray:
        """Return the individual's infected probability (population i at Nash)."""
        return self.i if self.psi_i is None else self.psi_i

    def columns(self) -> dict:
        """Return the populated series keyed by column name, r included."""
        cols = {"t": self.t, "s": self.s, "i": self.i, "r": self.r, "k": self.k, "eps": self.eps}
        for name in ("vs", "vi", "ls", "li", "psi_s", "psi_i"):
            value = getattr(self, name)
            if value is not None:
                cols[name] = value
        return cols

    def with_series(self, **changes) -> "Trajectory":
        """Return a copy with some series replaced."""
        return replace(self, **changes)


@dataclass(frozen=True)
class ScenarioMetrics:
    """Summary numbers of one solved scenario."""

    peak_i: float
    total_cases: float
    duration: float
    total_cost: float
    branch: Optional[str] = field(default=None)

    def to_dict(self) -> dict:
        """Return the metrics as a plain dictionary."""
        return asdict(self)


def infection_cost(i, c: CostProfile):
    """Return the cost per infection at infected fraction i."""
    step = np.tanh((np.asarray(i, dtype=float) - c.i_hc) * c.sigma)
    return c.alpha0 + 0.5 * (c.alpha1 - c.alpha0) * (step + 1.0)


def infection_cost_derivative(i, c: CostProfile):
    """Return d(infection_cost)/di."""
    x = np.abs((np.asarray(i, dtype=float) - c.i_hc) * c.sigma)
    # sech^2 written without cosh to avoid overflow far from the threshold
    decay = np.exp(-2.0 * x)
    sech2 = 4.0 * decay / (1.0 + decay) ** 2
    return 0.5 * (c.alpha1 - c.alpha0) * c.sigma * sech2


def alpha_at_zero(c: CostProfile) -> float:
    """Return the infection cost at i = 0, slightly above alpha0 for a threshold profile."""
    return float(infection_cost(0.0, c))


def marginal_infection_cost(i, c: CostProfile):
    """Return d(alpha(i) i)/di, the cost of one more infected individual to the population."""
    cost = infection_cost(i, c)
    if c.is_constant:
        return cost
    return cost + infection_cost_derivative(i, c) * np.asarray(i, dtype=float)


def discount(t, f: float):
    """Return the discount weight f^-t."""
    return np.power(f, -np.asarray(t, dtype=float))


def salvage_coefficient(t_f: float, c: CostProfile) -> float:
    """Return the marginal salvage value of the infected state at t_f.

    The post-horizon tail is approximated as -f^-t_f alpha(0) psi_i(t_f) / (1 + log f).
    """
    return -(c.f ** (-t_f)) * alpha_at_zero(c) / (1.0 + math.log(c.f))


def as_series(values: Optional[Series], p: EpidemicParams, name: str = "series") -> np.ndarray:
    """Broadcast a constant or validate a grid-aligned series."""
    if values is None:
        return np.zeros(int(p.n_grid))
    array = np.asarray(values, dtype=float)
    if array.ndim == 0:
        return np.full(int(p.n_grid), float(array))
    if array.shape != (int(p.n_grid),):
        raise InvalidSpecError(
            f"{name} has {array.size} values but the grid has {int(p.n_grid)} points"
        )
    return array.copy()


def linear_coefficients(
    matrix: Sequence[Sequence[Series]], forcing: Sequence[Series], size: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Broadcast the entries of y' = A y + b into arrays of shape (size, d, d) and (size, d)."""
    dim = len(forcing)
    a = np.empty((size, dim, dim))
    b = np.empty((size, dim))
    for row in range(dim):
        b[:, row] = forcing[row]
        for col in range(dim):
            a[:, row, col] = matrix[row][col]
    return a, b


def _apply(matrix: np.ndarray, vector: np.ndarray) -> np.ndarray:
    return np.einsum("nij,nj->ni", matrix, vector)


def _affine_rk4_steps(
    start: Tuple[np.ndarray, np.ndarray],
    mid: Tuple[np.ndarray, np.ndarray],
    end: Tuple[np.ndarray, np.ndarray],
    h: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Return (P, q) such that one RK4 step of a linear system maps y to P y + q.

    ``start``, ``mid`` and ``end`` hold the coefficients (A, b) of every interval at the
    point the step leaves, its midpoint and the point it reaches.
    """
    eye = np.eye(start[1].shape[-1])
    hh = h[:, None, None]
    hv = h[:, None]
    (m1, c1), (a_mid, b_mid), (a_end, b_end) = start, mid, end

    m2 = a_mid @ (eye + 0.5 * hh * m1)
    c2 = _apply(a_mid, 0.5 * hv * c1) + b_mid
    m3 = a_mid @ (eye + 0.5 * hh * m2)
    c3 = _apply(a_mid, 0.5 * hv * c2) + b_mid
    m4 = a_end @ (eye + hh * m3)
    c4 = _apply(a_end, hv * c3) + b_end

    step = eye + hh / 6.0 * (m1 + 2.0 * m2 + 2.0 * m3 + m4)
    shift = hv / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
    return step, shift


def _propagate(step: np.ndarray, shift: np.ndarray, y_start: Sequence[float]) -> np.ndarray:
    """Compose the step maps from y_start and return every visited state."""
    count, dim = shift.shape
    out = np.empty((count + 1, dim))
    out[0] = y_start
    if dim != 2:
        for j in range(count):
            out[j + 1] = step[j] @ out[j] + shift[j]
        return out
    p00, p01 = step[:, 0, 0].tolist(), step[:, 0, 1].tolist()
    p10, p11 = step[:, 1, 0].tolist(), step[:, 1, 1].tolist()
    q0, q1 = shift[:, 0].tolist(), shift[:, 1].tolist()
    y0, y1 = float(y_start[0]), float(y_start[1])
    first, second = [y0], [y1]
    for j in range(count):
        y0, y1 = p00[j] * y0 + p01[j] * y1 + q0[j], p10[j] * y0 + p11[j] * y1 + q1[j]
        first.append(y0)
        second.append(y1)
    out[:, 0] = first
    out[:, 1] = second
    return out


def rk4_linear(
    system: LinearSystem,
    y_start: Sequence[float],
    t: np.ndarray,
    inputs: Sequence[np.ndarray],
    backward: bool = False,
) -> List[np.ndarray]:
    """Integrate a linear system y' = A(t, u) y + b(t, u) with classical RK4 on a fixed grid.

    Inputs are interpolated linearly between nodes, so forward and backward passes share the
    same nodes exactly. Every RK4 step is an affine map of the state; the maps of all
    intervals are built at once and only their composition runs step by step.

    Args:
        system: function (t, *u) -> (A, b) evaluated on arrays of times and inputs
        y_start: state at t[0], or at t[-1] when backward is True
        t: grid
        inputs: series evaluated at the grid nodes
        backward: integrate from t[-1] down to t[0]

    Returns:
        one array per state component, aligned with t

    Raises:
        IntegrationError: if the state becomes non-finite
    """
    t = np.asarray(t, dtype=float)
    cols = [np.asarray(u, dtype=float) for u in inputs]
    a_node, b_node = system(t, *cols)
    mid = system(0.5 * (t[:-1] + t[1:]), *[0.5 * (u[:-1] + u[1:]) for u in cols])
    left, right = (a_node[:-1], b_node[:-1]), (a_node[1:], b_node[1:])
    h = np.diff(t)
    with np.errstate(over="ignore", invalid="ignore"):
        if backward:
            flip = tuple(tuple(x[::-1] for x in pair) for pair in (right, mid, left))
            step, shift = _affine_rk4_steps(*flip, -h[::-1])
            states = _propagate(step, shift, y_start)[::-1]
        else:
            step, shift = _affine_rk4_steps(left, mid, right, h)
            states = _propagate(step, shift, y_start)

    finite = np.all(np.isfinite(states), axis=1)
    if not finite.all():
        bad = np.flatnonzero(~finite)
        node = int(bad[-1] if backward else bad[0])
        raise IntegrationError(f"non-finite state at t={t[node]:.6g}", time=float(t[node]))
    return [np.ascontiguousarray(states[:, m]) for m in range(states.shape[1])]


def check_fractions(t: np.ndarray, states: Sequence[np.ndarray]) -> None:
    """Raise IntegrationError at the first node where a compartment fraction leaves [0, 1]."""
    values = np.vstack([np.asarray(x, dtype=float) for x in states])
    with np.errstate(invalid="ignore"):
        outside = (values < -STATE_TOLERANCE) | (values > 1.0 + STATE_TOLERANCE)
    bad = np.flatnonzero(np.any(outside | ~np.isfinite(values), axis=0))
    if bad.size == 0:
        return
    node = int(bad[0])
    column = values[:, node]
    if not np.all(np.isfinite(column)):
        raise IntegrationError(f"non-finite state at t={t[node]:.6g}", time=float(t[node]))
    value = column[np.argmax(np.abs(column - 0.5))]
    raise IntegrationError(
        f"compartment fraction {value:.6g} left [0, 1] at t={t[node]:.6g}", time=float(t[node])
    )


def _sir_rk4(k: np.ndarray, t: np.ndarray, s0: float, i0: float) -> Tuple[np.ndarray, np.ndarray]:
    """Integrate the SIR pair forward with RK4; the only nonlinear pass on the grid."""
    k_start, k_end = k[:-1].tolist(), k[1:].tolist()
    k_mid = (0.5 * (k[:-1] + k[1:])).tolist()
    steps = np.diff(t).tolist()
    s, i = s0, i0
    s_out, i_out = [s], [i]
    for ka, km, kb, h in zip(k_start, k_mid, k_end, steps):
        r1 = ka * s * i
        d1s, d1i = -r1, r1 - i
        s2, i2 = s + 0.5 * h * d1s, i + 0.5 * h * d1i
        r2 = km * s2 * i2
        d2s, d2i = -r2, r2 - i2
        s3, i3 = s + 0.5 * h * d2s, i + 0.5 * h * d2i
        r3 = km * s3 * i3
        d3s, d3i = -r3, r3 - i3
        s4, i4 = s + h * d3s, i + h * d3i
        r4 = kb * s4 * i4
        s += h / 6.0 * (d1s + 2.0 * d2s + 2.0 * d3s - r4)
        i += h / 6.0 * (d1i + 2.0 * d2i + 2.0 * d3i + r4 - i4)
        s_out.append(s)
        i_out.append(i)
    return np.array(s_out), np.array(i_out)


def integrate_sir(k: Series, p: EpidemicParams) -> Trajectory:
    """Integrate s' = -k s i, i' = k s i - i from s(0) = 1 - i0, i(0) = i0.

    Args:
        k: behaviour on the grid, or a constant
        p: epidemic parameters

    Returns:
        Trajectory with s, i, k filled and eps set to zero
    """
    t = p.grid
    behaviour = as_series(k, p, name="behaviour k")
    if np.any(behaviour < 0) or not np.all(np.isfinite(behaviour)):
        raise InvalidSpecError("behaviour k must be finite and non-negative on the grid")
    s, i = _sir_rk4(behaviour, t, 1.0 - p.i0, p.i0)
    check_fractions(t, (s, i))
    return Trajectory(t=t, s=s, i=i, k=behaviour, eps=np.zeros_like(t))


def time_above(t: np.ndarray, values: np.ndarray, threshold: float) -> float:
    """Return the measure of {t : values(t) > threshold} for the linear interpolant."""
    excess = np.asarray(values, dtype=float) - threshold
    a, b = excess[:-1], excess[1:]
    h = np.diff(np.asarray(t, dtype=float))
    both = (a > 0) & (b > 0)
    falling = (a > 0) & (b <= 0)
    rising = (a <= 0) & (b > 0)
    measure = np.sum(h[both])
    measure += np.sum(h[falling] * a[falling] / (a[falling] - b[falling]))
    measure += np.sum(h[rising] * b[rising] / (b[rising] - a[rising]))
    return float(measure)


def peak_value(values: np.ndarray) -> float:
    """Return the largest sampled value of a curve."""
    return float(np.max(np.asarray(values, dtype=float)))


def horizon_ok(traj: Trajectory) -> bool:
    """Return True if i(t_f) is small enough for the salvage approximation."""
    return bool(traj.i[-1] < HORIZON_THRESHOLD)


def metrics(traj: Trajectory, total_cost: float, branch: Optional[str] = None) -> ScenarioMetrics:
    """Summarise a trajectory.

    Args:
        traj: populated trajectory
        total_cost: negative utility computed by the owning role
        branch: government branch label, None for other roles
    """
    peak = min(max(peak_value(traj.i), 0.0), 1.0)
    total_cases = min(max(1.0 - float(traj.s[-1]), 0.0), 1.0)
    return ScenarioMetrics(
        peak_i=peak,
        total_cases=total_cases,
        duration=time_above(traj.t, traj.i, DURATION_THRESHOLD),
        total_cost=float(total_cost),
        branch=branch,
    )
