"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """A NaN, overflow or singular system was encountered."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ValidationError(ValueError):
    """Input data failed validation (e.g. a target row is not a distribution)."""


class ConfigError(ValueError):
    """Invalid configuration value; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class SamplingError(ValueError):
    """Not enough samples to draw the requested episode."""


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class RenderError(ValueError):
    """A class id has no palette entry."""
