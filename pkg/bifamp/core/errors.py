"""
BiFAMP Errors
Exception hierarchy shared by the services and the CLI
"""
from typing import Optional

import numpy as np


class BifampError(Exception):
    """Base class for every error raised by the package."""
    exit_code = 1


class InvalidArgumentError(BifampError, ValueError):
    exit_code = 2


class ConfigError(BifampError):
    exit_code = 2


class UnsupportedError(BifampError):
    """Operation not defined for the given prior or channel variant."""
    exit_code = 2


class SizeGuardError(BifampError):
    """Instance too large for the requested algorithm."""
    exit_code = 2


class NumericalError(BifampError):
    exit_code = 3


class DivergenceError(NumericalError):
    """NaN or Inf appeared during an iteration."""

    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message)
        self.iteration = iteration


class QuadratureError(NumericalError):
    pass


class BracketError(NumericalError):
    """The search bracket does not straddle a change of the indicator."""
    pass


class UnconvergedError(BifampError):
    """Raised by the CLI in strict mode when a run hit its iteration cap."""
    exit_code = 4


def require_finite(name: str, *values) -> None:
    """Raise InvalidArgumentError when any value is NaN or infinite."""
    for value in values:
        if not np.all(np.isfinite(value)):
            raise InvalidArgumentError(f"{name} must be finite")
