"""Exception types shared across the package."""


class TevitError(Exception):
    """Base class."""


class DimensionError(TevitError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(TevitError, ValueError):
    """A documented precondition was violated."""


class NumericError(TevitError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ConfigError(TevitError, ValueError):
    """Invalid configuration value."""
