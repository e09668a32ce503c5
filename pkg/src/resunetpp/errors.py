"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Input values fall outside an operation's numeric domain."""


class UsageError(RuntimeError):
    """API misuse, e.g. mixing variables from different tapes."""


class ValidationError(ValueError):
    """Invalid configuration or data."""


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


class NonFiniteLossError(RuntimeError):
    """Training hit a NaN/Inf loss and was aborted."""
