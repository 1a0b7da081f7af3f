"""Exception hierarchy shared by all pyrocast modules.

The CLI maps the three families onto exit codes: ``ConfigError`` -> 2,
``DataError`` -> 3, anything else derived from ``PyrocastError`` -> 4.
"""


class PyrocastError(Exception):
    """Base class for every error raised deliberately by the package."""


class ConfigError(PyrocastError, ValueError):
    pass


class DataError(PyrocastError, ValueError):
    pass


class InvalidConfig(ConfigError):
    pass


class InvalidScheduleBounds(ConfigError):
    pass


class InvalidEnsembleSize(ConfigError):
    pass


class NonAdjacentCells(PyrocastError, ValueError):
    pass


class DimensionMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class IgnitionOnUnburnable(DataError):
    pass


class NoBurnableCells(DataError):
    pass


class CorruptFile(DataError):
    pass


class VersionMismatch(DataError):
    pass


class RangeViolation(DataError):
    pass


class CheckpointMismatch(DataError):
    pass


class NoValidPixels(DataError):
    pass


class InsufficientSamples(DataError):
    pass


class FrameTooSmall(DataError):
    pass


class UntrainedNetWarning(UserWarning):
    """Sampling from a network that has not taken a single optimiser step."""
