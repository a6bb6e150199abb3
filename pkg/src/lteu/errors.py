"""Exception hierarchy shared by the library and the command line."""


class LTEUError(Exception):
    """Base class for all library errors."""


class ConfigError(LTEUError, ValueError):
    """Invalid scenario or run parameters."""


class InfeasibleDemandError(LTEUError):
    """The coupled power system has no finite solution for the requested rates."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class FeasibilityError(LTEUError):
    """Expected valuations cannot be made monotone, so no feasible menu exists."""


class MatchingError(LTEUError, ValueError):
    """Misuse of the matching primitives (e.g. a target outside the remaining list)."""
