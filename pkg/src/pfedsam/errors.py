"""Exception types shared across the package."""


class PFedSAMError(Exception):
    """Base class for all errors raised by pfedsam."""


class ShapeError(PFedSAMError, ValueError):
    pass


class NumericError(PFedSAMError, ArithmeticError):
    pass


class ConfigError(PFedSAMError, ValueError):
    """Invalid configuration; ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ValidationError(PFedSAMError, ValueError):
    pass


class ProtocolError(PFedSAMError, RuntimeError):
    """Federation contract violated (mismatched parameter maps and similar)."""


class FormatError(PFedSAMError, ValueError):
    """Malformed on-disk data; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GenerationError(PFedSAMError, RuntimeError):
    pass
