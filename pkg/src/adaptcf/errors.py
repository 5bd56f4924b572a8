"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad setting, missing column, unknown model."""


class DataError(ValueError):
    """Input data violates a structural precondition."""


class NumericError(ArithmeticError):
    """A numerical routine could not produce a usable result."""


class StateError(RuntimeError):
    """An object was used before it was ready (e.g. an untrained model)."""
