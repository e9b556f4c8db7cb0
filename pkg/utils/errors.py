"""
Exception hierarchy shared by all reconstruction stages.

Each error may carry a ``stage`` tag naming the pipeline stage that failed;
the command-line runner maps the class to an exit code.
"""
from typing import Optional


class ReconstructionError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.stage = stage

    def tagged(self) -> str:
        """Message prefixed with the stage tag, if any."""
        if self.stage:
            return f"[{self.stage}] {self}"
        return str(self)


class ConfigError(ReconstructionError):
    """Invalid parameters, mismatched grids, CFL or sampling violations."""

    exit_code = 2


class DomainError(ConfigError):
    """Argument outside the supported domain of a numerical routine."""


class PhantomError(ConfigError):
    """Phantom feature violating the support or smoothness requirements."""


class NumericError(ReconstructionError):
    """Numerical guard tripped (tiny denominators, divergence, non-finite data)."""

    exit_code = 3


class StabilityError(NumericError):
    """Time stepping produced non-finite values."""


class MetricError(NumericError):
    """Metric undefined for the given inputs."""
