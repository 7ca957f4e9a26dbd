"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition on an argument was violated."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class StateError(RuntimeError):
    """An object is not in the state an operation needs."""


class FormatError(ValueError):
    """A binary or text file could not be decoded.

    ``offset`` is the byte offset at which decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
