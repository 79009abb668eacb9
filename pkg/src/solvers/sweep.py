# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Damped forward-backward sweep shared by every optimal-control solver."""

import logging
from dataclasses import asdict, dataclass, replace
from typing import Any, Callable, Optional, Tuple

import numpy as np

from exceptions import ConvergenceError, InvalidSpecError

logger = logging.getLogger(__name__)

LOG_EVERY = 50

# evaluate(control) -> (proposed control, state computed under the current control)
Evaluator = Callable[[np.ndarray], Tuple[np.ndarray, Any]]


@dataclass(frozen=True)
class SweepSettings:
    """Settings of one forward-backward sweep.

    Args:
        damping: weight of the proposed control in the update, in (0, 1]
        tol: sup-norm tolerance on the relative control change
        max_iter: iteration cap
        adaptive: halve the damping while the residual stalls
        min_damping: lower bound of the adaptive damping
        patience: iterations without a new best residual that trigger a halving
    """

    damping: float = 0.1
    tol: float = 1e-8
    max_iter: int = 10000
    adaptive: bool = True
    min_damping: float = 1e-3
    patience: int = 10

    def __post_init__(self):
        """Validate the settings."""
        if not 0 < self.damping <= 1:
            raise InvalidSpecError(f"damping must lie in (0, 1] - got {self.damping}")
        if not self.tol > 0:
            raise InvalidSpecError(f"tol must be > 0 - got {self.tol}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise InvalidSpecError(f"max_iter must be an integer >= 1 - got {self.max_iter}")
        if not 0 < self.min_damping <= self.damping:
            raise InvalidSpecError(
                f"min_damping must lie in (0, damping] - got {self.min_damping}"
            )
        if int(self.patience) != self.patience or self.patience < 1:
            raise InvalidSpecError(f"patience must be an integer >= 1 - got {self.patience}")

    @classmethod
    def outer(cls, **kwargs) -> "SweepSettings":
        """Return the heavier-damped defaults used for the government sweep."""
        settings = {"damping": 0.05, "tol": 1e-7, "max_iter": 5000, "min_damping": 1e-3}
        settings.update(kwargs)
        return cls(**settings)

    def with_changes(self, **kwargs) -> "SweepSettings":
        """Return a copy with some settings replaced."""
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        """Return the settings as a plain dictionary."""
        return asdict(self)


@dataclass(frozen=True)
class SweepResult:
    """Outcome of a converged sweep.

    ``control`` is the iterate the final state was computed with, ``proposal`` the
    control the update rule returned for that state.
    """

    control: np.ndarray
    proposal: np.ndarray
    state: Any
    iterations: int
    residual: float
    damping: float


class _DampingSchedule:
    """Damping of one sweep, cut when the residual stops reaching new lows.

    After ``patience`` iterations without a new best residual the damping is halved and the
    next update restarts from the best iterate seen so far.
    """

    def __init__(self, settings: SweepSettings, name: str):
        self.settings = settings
        self.name = name
        self.damping = settings.damping
        self.best = np.inf
        self.stalled = 0
        self.control: Optional[np.ndarray] = None
        self.proposal: Optional[np.ndarray] = None

    def step_from(
        self, control: np.ndarray, proposal: np.ndarray, residual: float
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Record an iterate and return the (control, proposal) pair the update starts from."""
        if not self.settings.adaptive:
            return control, proposal
        if residual < self.best:
            self.best, self.stalled = residual, 0
            self.control, self.proposal = control.copy(), proposal.copy()
            return control, proposal
        self.stalled += 1
        if self.stalled < self.settings.patience or self.damping <= self.settings.min_damping:
            return control, proposal
        self.damping = max(0.5 * self.damping, self.settings.min_damping)
        self.stalled = 0
        logger.debug(
            "%s: residual stalled above %.3e, damping reduced to %.3g",
            self.name,
            self.best,
            self.damping,
        )
        return self.control, self.proposal


def relative_change(proposal: np.ndarray, control: np.ndarray) -> float:
    """Return ||proposal - control||_inf / max(||control||_inf, 1)."""
    scale = max(float(np.max(np.abs(control))) if len(control) else 0.0, 1.0)
    return float(np.max(np.abs(proposal - control))) / scale


def forward_backward_sweep(
    evaluate: Evaluator,
    initial: np.ndarray,
    settings: SweepSettings,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    name: str = "sweep",
) -> SweepResult:
    """Iterate control <- (1 - w) control + w proposal until the proposal stops moving.

    Args:
        evaluate: runs the forward and backward passes for a control and returns the
            proposed control together with the computed state
        initial: initial control on the grid
        settings: damping, tolerance and iteration cap
        project: optional projection applied after each damped update
        name: label used in log records and errors

    Raises:
        ConvergenceError: if max_iter iterations pass without convergence
    """
    control = np.array(initial, dtype=float)
    if project is not None:
        control = project(control)
    schedule = _DampingSchedule(settings, name)
    residual = np.inf

    for iteration in range(1, int(settings.max_iter) + 1):
        proposal, state = evaluate(control)
        residual = relative_change(proposal, control)
        if not np.isfinite(residual):
            raise ConvergenceError(
                f"{name}: non-finite control update at iteration {iteration}",
                residual=residual,
                iterations=iteration,
                last_iterate=control,
            )
        if iteration % LOG_EVERY == 0:
            logger.debug("%s: iteration %d residual %.3e", name, iteration, residual)
        if residual < settings.tol:
            logger.debug(
                "%s: converged after %d iterations, residual %.3e", name, iteration, residual
            )
            return SweepResult(
                control=control,
                proposal=np.asarray(proposal, dtype=float),
                state=state,
                iterations=iteration,
                residual=residual,
                damping=schedule.damping,
            )

        proposal = np.asarray(proposal, dtype=float)
        start, target = schedule.step_from(control, proposal, residual)
        control = (1.0 - schedule.damping) * start + schedule.damping * target
        if project is not None:
            control = project(control)

    raise ConvergenceError(
        f"{name}: no convergence after {int(settings.max_iter)} iterations "
        f"(residual {residual:.3e}, tolerance {settings.tol:.1e})",
        residual=residual,
        iterations=int(settings.max_iter),
        last_iterate=control,
    )
