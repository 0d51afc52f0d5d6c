class GlobalWinError(Exception):
    """Base class for all package errors."""


class DataError(GlobalWinError):
    """Input file or dataset violates the trial data model."""


class ConvergenceError(GlobalWinError):
    """Variance component estimation failed."""


class DegreesOfFreedomError(GlobalWinError):
    """A t reference distribution was requested with fewer than one df."""


class ConfigError(GlobalWinError):
    """Malformed simulation or analysis configuration."""


class UnattainableTargetError(GlobalWinError):
    """A design target cannot be reached with the given marginals."""


class InputError(GlobalWinError):
    """An input or configuration file could not be read."""
