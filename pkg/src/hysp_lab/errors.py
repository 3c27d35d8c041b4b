"""Exception and warning types shared across the package."""


class InvalidInput(ValueError):
    """Raised when an argument violates an operation's precondition."""


class ShapeError(InvalidInput):
    """Raised when array shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


class CorruptFile(IOError):
    """Raised when a binary artifact cannot be decoded."""


class CorruptCheckpoint(CorruptFile):
    """Raised when a checkpoint file is truncated or has a bad header."""


class AtMinimum(UserWarning):
    """Emitted when a gradient is requested exactly at the loss minimum."""
