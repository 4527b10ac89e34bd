"""Shared exception types."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class LoadError(ValueError):
    """A file on disk is missing or malformed."""


class NumericsError(RuntimeError):
    """Training produced a non-finite value and was aborted."""
