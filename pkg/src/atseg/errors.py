"""Exception types shared across the toolkit."""


class AtsegError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AtsegError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ContractError(AtsegError, ValueError):
    """A precondition on argument values was violated."""


class NonFiniteError(AtsegError, FloatingPointError):
    """A tensor contains NaN or infinite values."""


class ParseError(AtsegError):
    """A file on disk is malformed.

    ``offset`` is the byte offset at which the problem was detected, or None
    when the problem is not tied to one position.
    """

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class VersionError(ParseError):
    """A checkpoint was written by an unsupported format version."""


class TrainingError(AtsegError, RuntimeError):
    """Training diverged (e.g. the loss became NaN)."""
