"""Exception types shared across the package."""


class GlabError(Exception):
    """Base class for all package errors."""


class ScenarioBoundsError(GlabError, ValueError):
    """A volatility scenario emitted a value outside the variance band."""


class SimulationError(GlabError, RuntimeError):
    """Too many paths became non-finite during state simulation."""


class RegressionError(GlabError, RuntimeError):
    """The regression basis is numerically singular; change the basis."""


class UnsupportedModeError(GlabError, RuntimeError):
    """The requested check has no estimator in this artifact."""


class ConfigError(GlabError, ValueError):
    """Malformed or inconsistent run configuration."""
