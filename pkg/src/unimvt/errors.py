"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration: bad shapes, unreachable calibration targets, bad grids."""


class NumericError(ArithmeticError):
    """Non-finite values showed up where finite math is required."""


class UsageError(RuntimeError):
    """API misuse: operations invoked in an unsupported order or on empty inputs."""


class DataFormatError(ValueError):
    """Malformed dataset file."""


class MetricUndefinedError(ValueError):
    """A metric has no defined value on the given inputs (e.g. single-class AUC)."""
