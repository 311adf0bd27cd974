"""Exception types shared across the package."""


class LoraDropError(Exception):
    """Base class for all package errors."""


class DimensionError(LoraDropError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(LoraDropError):
    """An argument violates a documented precondition."""


class DegeneracyError(LoraDropError):
    """A mask or attention row became fully dropped where that is undefined."""


class NumericError(LoraDropError):
    """A numerically invalid operation (division by zero, log of nonpositive)."""
