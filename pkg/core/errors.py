"""
Exception hierarchy for the backdoor poisoning laboratory.

Parameter and shape problems also derive from ValueError so callers that only
know the standard library can still catch them.
"""


class BackdoorLabError(Exception):
    """Base class for every error raised by the laboratory."""


class InvalidRangeError(BackdoorLabError, ValueError):
    """A lower bound exceeds its upper bound."""


class InvalidSizeError(BackdoorLabError, ValueError):
    """A requested image size has a zero or negative dimension."""


class PlacementError(BackdoorLabError, ValueError):
    """A patch does not fit inside the canvas at the requested anchor."""


class ShapeError(BackdoorLabError, ValueError):
    """Two arrays that must share a shape do not."""


class InvalidParameterError(BackdoorLabError, ValueError):
    """A scalar parameter is outside its admissible range."""


class FormatError(BackdoorLabError, ValueError):
    """A binary file has a wrong magic number or a truncated payload."""


class InsufficientPoolError(BackdoorLabError):
    """The benign pool holds fewer images than the attack needs."""


class InvalidWrongKeyError(BackdoorLabError):
    """The wrong key equals the true key or leaves no usable instances."""


class EmptyDatasetError(BackdoorLabError):
    """An operation produced or received a dataset without samples."""


class SplitError(BackdoorLabError):
    """A label has too few samples for the requested split."""


class LabelError(BackdoorLabError, ValueError):
    """A label id is outside the dataset's label space."""


class ProtocolError(BackdoorLabError):
    """The leave-one-out protocol cannot be applied."""


class NumericalError(BackdoorLabError, ArithmeticError):
    """A loss or gradient is not finite."""


class TrainingError(BackdoorLabError):
    """Training diverged."""

    def __init__(self, message: str, epoch: int) -> None:
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ModeError(BackdoorLabError):
    """The requested training mode is not available for the architecture."""


class EmptyEvalError(BackdoorLabError):
    """A metric was asked to score an empty instance set."""


class PreconditionError(BackdoorLabError):
    """Inputs violate a metric's precondition."""


class ComparisonError(BackdoorLabError):
    """Two reports cannot be compared."""


class AxisError(BackdoorLabError, KeyError):
    """A sweep table has no column with the requested name."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ConfigError(BackdoorLabError):
    """An experiment configuration is malformed or inconsistent."""


class PipelineError(BackdoorLabError):
    """A pipeline stage failed; wraps the underlying error."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
