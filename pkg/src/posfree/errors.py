"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PosfreeError(Exception):
    exit_code = 1


class ConfigError(PosfreeError, ValueError):
    """Bad configuration or shape mismatch."""

    exit_code = 1


class UsageError(PosfreeError, RuntimeError):
    """API called in a state that does not support it."""

    exit_code = 1


class DataError(PosfreeError, ValueError):
    """Malformed or out-of-range input data."""

    exit_code = 2


class NumericError(PosfreeError, ArithmeticError):
    """Non-finite value or singular system encountered."""

    exit_code = 3


PARTIAL_SWEEP_EXIT = 4
