"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Unknown or inconsistent configuration."""


class DataError(RuntimeError):
    """No usable training or evaluation data."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf surfaced in a tensor that must stay finite."""
