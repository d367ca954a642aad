"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class OphmmError(Exception):
    exit_code = 1


class ConfigError(OphmmError, ValueError):
    """Invalid configuration or arguments."""

    exit_code = 2


class DataError(OphmmError, ValueError):
    """Input data that cannot be used (malformed, inconsistent, disconnected grid)."""

    exit_code = 3


class NumericalError(OphmmError, ArithmeticError):
    """Numerical abort, e.g. data impossible under every particle."""

    exit_code = 4
