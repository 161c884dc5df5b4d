"""Exception types raised across the toolkit."""


class InvalidParameterError(ValueError):
    """An argument violates a documented precondition."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class InvalidStateError(RuntimeError):
    """An operation was called on data that is not ready for it."""


class ResourceLimitError(MemoryError):
    """A request exceeds the configured size limits."""
