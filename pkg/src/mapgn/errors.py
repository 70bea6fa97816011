"""Failure categories shared across the package (and mapped to CLI exit codes)."""


class ConfigError(ValueError):
    """Invalid run configuration; message lists every violation found."""


class DataError(ValueError):
    """Malformed or missing input data."""


class NumericError(RuntimeError):
    """Non-finite values encountered during optimization."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""
