"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or out of range."""


class LifecycleError(RuntimeError):
    """An operation was called in the wrong order (e.g. merging twice)."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where the math guarantees finiteness."""
