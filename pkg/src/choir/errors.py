"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: usage errors exit 1,
data/validation errors exit 2, numeric failures exit 3.
"""


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for an operation."""


class DataFormatError(ValueError):
    """A file, record, or configuration failed validation."""


class NumericFailure(RuntimeError):
    """A computation produced NaN/Inf or diverged."""
