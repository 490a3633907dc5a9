"""Exception types shared across the toolkit."""


class MasvError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(MasvError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(MasvError, ValueError):
    """A documented precondition was violated."""


class NumericError(MasvError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class StateError(MasvError, ValueError):
    """Streaming or normalization state is missing or incompatible."""


class ConfigError(MasvError, ValueError):
    """Invalid model or run configuration."""


class ParseError(MasvError, ValueError):
    """Malformed input file.  ``offset`` is the byte position, when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LengthError(MasvError, ValueError):
    """Input is too short to produce any output frame."""
