"""Exception hierarchy shared by every module of the package."""


class GhostError(Exception):
    """Base class for all errors raised by ghostv2."""


class ShapeError(GhostError, ValueError):
    """Operand extents are incompatible with the requested operation."""


class ParameterError(GhostError, ValueError):
    """A scalar or structural parameter is out of its valid range."""


class ConfigError(GhostError, ValueError):
    """A model or block configuration violates its invariants."""


class UsageError(GhostError):
    """An API was called in a way it does not support."""


class DivergenceError(GhostError, RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class WeightFileError(GhostError):
    """Base class for weight-file problems."""


class MagicError(WeightFileError):
    pass


class VersionError(WeightFileError):
    pass


class TruncationError(WeightFileError):
    pass


class ChecksumError(WeightFileError):
    pass


class NameMismatchError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    pass
