"""Exception hierarchy shared by every module."""


class SimulationError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SimulationError, ValueError):
    """Inconsistent or out-of-range input parameters."""


class NumericalStateError(SimulationError):
    """A density or state violates a structural invariant."""


class ConvergenceError(SimulationError):
    """Self-consistent iteration did not converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


class TrajectoryAbort(SimulationError):
    """A stochastic path became numerically singular and is dropped."""


class UnsupportedOperation(SimulationError):
    """Operation not defined for the given model kind or ensemble form."""


class DataError(SimulationError, ValueError):
    """Invalid numeric data passed to an analysis routine."""


class ExcessiveAborts(SimulationError):
    """Too many trajectories of an ensemble were aborted."""
