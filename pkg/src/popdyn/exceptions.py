"""Exception hierarchy shared across popdyn."""


class PopdynError(Exception):
    """Base class for all popdyn errors."""


class ConfigError(PopdynError, ValueError):
    """Raised when a configuration or input violates its contract."""


class NumericalError(PopdynError, ArithmeticError):
    """Base class for failures of a numerical procedure."""


class NoEquilibrium(NumericalError):
    """The equilibrium root function has no sign change on the search bracket."""


class GraphSamplingExhausted(NumericalError):
    """Rejection sampling failed to produce a strongly connected graph."""


class NumericalBlowup(NumericalError):
    """An integrated state left the admissible range."""


class InsufficientResolution(NumericalError):
    """A trapezoid integral did not pass the step-halving check."""


class NotConverged(NumericalError):
    """An iterative solver stopped before reaching its tolerance."""


class StateSpaceTooLarge(NumericalError):
    """The requested finite state space exceeds the enumeration limit."""
