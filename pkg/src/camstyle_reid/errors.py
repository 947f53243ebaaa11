"""Exception hierarchy. CLI exit codes are attached to each class."""


class ReidError(Exception):
    exit_code = 1


class ConfigError(ReidError, ValueError):
    """Bad hyperparameter, unknown config key or malformed CLI usage."""

    exit_code = 1


class ValidationError(ReidError, ValueError):
    """An argument violates an operation's precondition."""

    exit_code = 2


class DataError(ReidError):
    """Missing, empty or unparseable dataset input."""

    exit_code = 2


class DivergenceError(ReidError, ArithmeticError):
    """A training loss became non-finite."""

    exit_code = 3
