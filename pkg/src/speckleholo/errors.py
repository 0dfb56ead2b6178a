"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to so the command layer can
translate failures without a lookup table.
"""


class SpeckleError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(SpeckleError, ValueError):
    exit_code = 2


class ParameterError(ValidationError):
    """An argument violates an operation precondition."""


class DimensionError(ValidationError):
    """A grid axis has an unsupported size."""

    def __init__(self, axis, size, reason=""):
        self.axis = axis
        self.size = size
        msg = f"unsupported {axis}={size}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class ShapeError(ValidationError):
    """Two operands do not share dimensions or pitch."""


class GeometryError(ValidationError):
    """A particle does not fit in the simulated field of view."""


class ConfigurationError(ValidationError):
    """Bases and measurements were produced under different optical configs."""

    def __init__(self, message, species=None):
        self.species = species
        super().__init__(message)


class NumericError(SpeckleError, ArithmeticError):
    exit_code = 3


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")


class ConvergenceError(NumericError):
    """A solver failed to certify its answer."""


class FormatError(SpeckleError, OSError):
    """A persisted file is malformed."""

    exit_code = 4

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
