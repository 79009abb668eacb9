# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Errors carrying the process outcome they should map to."""

from typing import Optional, Tuple

import numpy as np

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_INVALID_SPEC = 3
EXIT_IO_ERROR = 4


class ErrorWithExitCode(Exception):
    """Base class of anticipated failures.

    Args:
        msg: human readable message
        exit_code: process exit code the CLI reports for this failure
    """

    def __init__(self, msg: str, exit_code: int):
        super().__init__(str(msg))
        self.msg = str(msg)
        self.exit_code = exit_code

    @property
    def status(self) -> Tuple[int, str]:
        """Return the (exit code, message) pair."""
        return self.exit_code, self.msg


class ConvergenceError(ErrorWithExitCode):
    """A forward-backward sweep reached its iteration cap."""

    def __init__(
        self,
        msg: str,
        residual: float,
        iterations: int,
        last_iterate: Optional[np.ndarray] = None,
    ):
        super().__init__(msg, EXIT_NOT_CONVERGED)
        self.residual = residual
        self.iterations = iterations
        self.last_iterate = last_iterate


class IntegrationError(ErrorWithExitCode):
    """An integration left its admissible range or produced non-finite values."""

    def __init__(self, msg: str, time: Optional[float] = None):
        super().__init__(msg, EXIT_NOT_CONVERGED)
        self.time = time


class InvalidSpecError(ErrorWithExitCode, ValueError):
    """A parameter set or scenario description violates an invariant."""

    def __init__(self, msg: str):
        super().__init__(msg, EXIT_INVALID_SPEC)


class ArtifactError(ErrorWithExitCode):
    """Writing or uploading an artifact failed."""

    def __init__(self, msg: str):
        super().__init__(msg, EXIT_IO_ERROR)
