"""Exception hierarchy.

Domain errors (bad data, invalid parameters) derive from :class:`MhspnaError`,
which the CLI maps to exit code 1. I/O problems surface as ``OSError`` and map
to exit code 2.
"""


class MhspnaError(ValueError):
    """Base class for data and parameter errors."""


class NetworkError(MhspnaError):
    """Malformed or inconsistent network input."""


class SnapError(MhspnaError):
    """A count point could not be resolved to exactly one link."""

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class ConfigError(MhspnaError):
    """Invalid project or analysis configuration."""


class CalibrationError(MhspnaError):
    """Regression inputs violate a precondition."""


class SingularSystemError(CalibrationError):
    """The unpenalized normal equations cannot be solved."""
