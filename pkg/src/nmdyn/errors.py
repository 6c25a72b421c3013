"""Exception hierarchy shared by all solvers.

The CLI maps these onto distinct exit codes, so solvers should raise the most
specific class that applies.
"""


class NmdynError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(NmdynError, ValueError):
    """Invalid user input: malformed config, bad parameters, unknown keys."""


class NumericalError(NmdynError, RuntimeError):
    """A computation produced non-finite values or failed to converge."""

    def __init__(self, message, *, step=None, time=None, residual=None):
        super().__init__(message)
        self.step = step
        self.time = time
        self.residual = residual


class InvariantError(NumericalError):
    """A density-matrix invariant was breached beyond its tolerance."""


class MapNotInvertibleError(NumericalError):
    """The dynamical map (or the amplitude u(t)) became singular."""


class KernelError(NumericalError):
    """A correlation kernel is unphysical (covariance not positive semidefinite)."""


class FitError(NumericalError):
    """Exponential fit residual exceeded the requested tolerance."""


class BudgetError(NmdynError):
    """A run would exceed a configured memory or work budget."""

    def __init__(self, message, *, requested=None, budget=None):
        super().__init__(message)
        self.requested = requested
        self.budget = budget


class PositivityViolation(NmdynError):
    """NMQJ backward jump needed but the source class is empty."""

    def __init__(self, message, *, time=None):
        super().__init__(message)
        self.time = time
