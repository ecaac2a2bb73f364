"""Shared exception types. Exit-code mapping lives in the CLI."""


class ValidationError(ValueError):
    """Bad configuration, malformed input files, or contract violations."""


class ShapeError(ValidationError):
    """Tensor/operand shapes do not agree."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-SPD matrix, non-finite values)."""
