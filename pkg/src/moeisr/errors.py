class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UsageError(ValueError):
    """A call violated a documented precondition."""


class ParseError(ValueError):
    """Malformed image or checkpoint bytes."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
