"""Exception types raised across the package."""


class DcacError(Exception):
    """Base class for all package errors."""


class ShapeError(DcacError, ValueError):
    pass


class NumericError(DcacError, ArithmeticError):
    pass


class DegenerateBatchError(DcacError, ValueError):
    """Training-mode BatchNorm was given fewer than two samples per channel."""


class ConfigError(DcacError, ValueError):
    pass


class InfeasibleAlignmentError(DcacError, ValueError):
    """The target cannot be aligned to the available number of frames."""


class ConsistencyError(DcacError, ValueError):
    pass


class TrainingDivergedError(DcacError, RuntimeError):
    def __init__(self, message, epoch=None, checkpoint=None):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint = checkpoint


class IntegrityError(DcacError, ValueError):
    """A checkpoint does not match the configuration it is loaded with."""


class TensorFormatError(DcacError, OSError):
    """A tensor file is truncated or has a bad header."""
