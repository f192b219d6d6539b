"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or otherwise invalid shapes."""


class FormatError(ValueError):
    """A serialized file is malformed; carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SamplingError(ValueError):
    """A mini-batch or dataset violates the sampling contract."""


class EvaluationError(ValueError):
    """A metric is undefined or an evaluation protocol was violated."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
