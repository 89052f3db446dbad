"""Exception types shared across the package."""


class PatchPriorError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PatchPriorError, ValueError):
    pass


class FormatError(PatchPriorError, ValueError):
    """Malformed or truncated file contents."""


class NumericalError(PatchPriorError, ArithmeticError):
    """A computation produced a non-finite value or a singular system."""

    def __init__(self, message, checkpoint=None, step=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step


class StateError(PatchPriorError, RuntimeError):
    pass


class UnsupportedOpError(PatchPriorError, NotImplementedError):
    pass
