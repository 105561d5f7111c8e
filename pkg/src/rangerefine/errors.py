"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: DataFormatError -> 2, NumericError -> 3.
"""


class DataFormatError(ValueError):
    """Malformed or inconsistent input data (truncated file, bad shape, bad label)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required (divergence, NaN activations)."""
