"""Exception types shared across the package."""


class MorphoError(Exception):
    """Base class for all package errors."""


class ConfigError(MorphoError, ValueError):
    """Invalid configuration, input file or argument."""


class NumericError(MorphoError, FloatingPointError):
    """A value became NaN/Inf where a finite value is required."""
