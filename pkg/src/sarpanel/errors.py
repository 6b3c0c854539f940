"""Exception types shared across the package."""


class SarpanelError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(SarpanelError, ValueError):
    """Invalid lattice/matrix/panel dimensions."""


class DegenerateDistanceError(SarpanelError, ValueError):
    """Duplicate coordinates make a distance-based weight matrix singular."""


class SingularityError(SarpanelError, RuntimeError):
    """A spatial operator (I - lambda*W or I - rho*M) is numerically singular."""


class DomainError(SarpanelError, ValueError):
    """A parameter is outside its admissible domain (e.g. sigma2 <= 0)."""


class FitError(SarpanelError, RuntimeError):
    """Likelihood maximisation failed; carries the optimizer trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class MonteCarloError(SarpanelError, RuntimeError):
    """A Monte Carlo estimate is unusable (too few draws, overflow, ...)."""


class CoverageError(SarpanelError, ValueError):
    """Density grid does not cover enough probability mass."""

    def __init__(self, message, suggested_bounds=None):
        super().__init__(message)
        self.suggested_bounds = suggested_bounds


class ConfigError(SarpanelError, ValueError):
    """Experiment configuration is invalid."""


class IngestionError(SarpanelError, ValueError):
    """Input data file violates the expected schema."""
