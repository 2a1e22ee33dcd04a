"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to.
"""


class FedscopeError(Exception):
    exit_code = 1


class ValidationError(FedscopeError, ValueError):
    exit_code = 2


class DimensionError(ValidationError):
    pass


class AggregationError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class InfeasibleError(FedscopeError):
    exit_code = 3

    def __init__(self, message, binding=()):
        super().__init__(message)
        self.binding = tuple(binding)


class StorageError(FedscopeError, OSError):
    exit_code = 4
