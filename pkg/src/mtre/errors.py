"""Exception hierarchy. Each class maps to a CLI exit code."""


class MTREError(Exception):
    exit_code = 1


class ConfigError(MTREError, ValueError):
    """Bad configuration, flags, or violated preconditions."""

    exit_code = 2


class DataError(MTREError, ValueError):
    """Malformed or invalid dataset content."""

    exit_code = 3


class NumericError(MTREError, ArithmeticError):
    """Non-finite values during training or scoring."""

    exit_code = 4
