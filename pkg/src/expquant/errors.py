"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when arguments violate an operation's preconditions."""


class DataCorruptionError(ValueError):
    """Raised when stored or derived data is internally inconsistent."""


class FormatError(ValueError):
    """Raised when a binary file cannot be parsed.

    Attributes:
        offset: Byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericalFailure(RuntimeError):
    """Raised when training produces a non-finite loss.

    Attributes:
        step: Index of the failing step.
        last_good: Model state from before the failing step (may be None).
    """

    def __init__(self, message: str, step: int, last_good=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


class ConfigError(InvalidInputError):
    """Raised for an invalid run configuration."""


class DataError(InvalidInputError):
    """Raised when input data cannot serve the requested operation."""
