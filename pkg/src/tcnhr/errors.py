"""Exception hierarchy shared by all modules."""


class TcnHrError(Exception):
    """Base class for all package errors."""


class DimensionError(TcnHrError, ValueError):
    """Tensor or weight shapes are inconsistent."""


class ArgumentError(TcnHrError, ValueError):
    """An argument is outside its valid domain (empty batch, short stream, ...)."""


class TapeError(TcnHrError, RuntimeError):
    """Backward was requested without a matching recorded forward."""


class TrainingError(TcnHrError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class PreconditionError(TcnHrError, RuntimeError):
    """An operation was called on an object in the wrong state."""


class FormatError(TcnHrError, ValueError):
    """A container file is malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class UnsupportedVersionError(FormatError):
    """A container was written by an incompatible format version."""
