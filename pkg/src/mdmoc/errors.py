"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` to exit code 2 and
:class:`NumericalError` to exit code 3.
"""


class MdmError(Exception):
    """Base class for all package errors."""


class ValidationError(MdmError, ValueError):
    """Inputs violate a precondition (shapes, ids, layouts, file formats)."""


class LayoutMismatchError(ValidationError):
    pass


class DuplicateIdError(ValidationError):
    pass


class UnknownIdError(ValidationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class CheckpointFormatError(ValidationError):
    """Bad magic bytes, unsupported version or dtype."""


class TruncatedFileError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class NonFiniteError(ValidationError):
    """A stored tensor contains NaN or Inf."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class IntegrityError(ValidationError):
    """A checksum or content hash does not match."""


class NumericalError(MdmError, ArithmeticError):
    """Non-finite losses or gradients, diverged training."""
