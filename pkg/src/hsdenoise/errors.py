"""Exception types shared across the library."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ValueError):
    """Input contains non-finite values or is numerically degenerate."""


class EmptySpectrumError(NumericError):
    """A singular-value spectrum was requested for an all-zero matrix."""


class DomainError(ValueError):
    """Input values fall outside the documented domain."""


class ConfigError(ValueError):
    """A configuration value is inconsistent or unsupported."""


class FormatError(IOError):
    """A file does not conform to the expected binary layout."""


class GraphError(RuntimeError):
    """The gradient tape records do not form a valid forward trace."""


class StateError(RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class TrainingDivergedError(RuntimeError):
    """Training aborted on a non-finite loss value."""

    def __init__(self, epoch: int, step: int, lr: float, loss: float):
        self.epoch = epoch
        self.step = step
        self.lr = lr
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, step {step}, lr {lr:.3e}"
        )
