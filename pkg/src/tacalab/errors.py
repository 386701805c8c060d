"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: validation failures
(ShapeError, DomainError) exit 1, I/O errors exit 2, numeric failures
(NumericError) exit 3.
"""


class ShapeError(ValueError):
    """Operands have incompatible or unexpected dimensions."""


class DomainError(ValueError):
    """A parameter is outside its documented domain."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""
