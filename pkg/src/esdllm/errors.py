"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all engine errors."""


class ConfigurationError(EngineError, ValueError):
    """Shapes or settings that cannot work together."""


class InputError(EngineError, ValueError):
    """Caller-supplied data is out of range or missing required content."""


class FormatError(EngineError):
    """A binary file does not follow the expected layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractViolation(EngineError, AssertionError):
    """A precondition on an internal call was broken."""
