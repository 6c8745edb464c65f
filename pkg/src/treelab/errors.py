"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(ValueError):
    """Input data violates a precondition (empty corpus, bad token, ...)."""


class TrainingAbort(RuntimeError):
    """Training stopped on a non-recoverable numerical failure (NaN)."""
