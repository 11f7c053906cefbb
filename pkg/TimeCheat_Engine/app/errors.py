from typing import Optional, Sequence


class TimeCheatError(Exception):
    """Base class for errors raised by the engine."""


class ConfigError(TimeCheatError, ValueError):
    """Raised when a configuration value or call argument is out of its allowed range."""


class ShapeError(TimeCheatError, ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, primitive: str, *shapes: Sequence[int], detail: str = ""):
        self.primitive = primitive
        self.shapes = tuple(tuple(shape) for shape in shapes)
        rendered = " vs ".join(str(shape) for shape in self.shapes)
        message = f"{primitive}: incompatible shapes {rendered}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class NonFiniteError(TimeCheatError, ArithmeticError):
    """Raised when a primitive receives or produces NaN/inf values."""


class UsageError(TimeCheatError, RuntimeError):
    """Raised when an API is called out of order (e.g. backward before forward)."""


class DatasetParseError(TimeCheatError, ValueError):
    """Raised when a dataset file line cannot be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ChannelRangeError(TimeCheatError, ValueError):
    """Raised when an observation or query names a channel outside [0, C)."""

    def __init__(self, channel: int, num_channels: int, line_number: Optional[int] = None):
        self.channel = channel
        self.num_channels = num_channels
        self.line_number = line_number
        message = f"channel {channel} out of range for C={num_channels}"
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class DuplicateObservationError(TimeCheatError, ValueError):
    """Raised when an instance holds two observations for the same (channel, time)."""

    def __init__(self, channel: int, time: float, line_number: Optional[int] = None):
        self.channel = channel
        self.time = time
        message = f"duplicate observation for channel {channel} at time {time!r}"
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class UndefinedMetricError(TimeCheatError, ValueError):
    """Raised when a ranking metric is requested for labels that make it undefined."""


class TaskMismatchError(TimeCheatError, ValueError):
    """Raised when a checkpoint is evaluated against a dataset of another task kind."""


class TrainingDivergedError(TimeCheatError, RuntimeError):
    """Raised when a training batch yields a non-finite loss."""

    def __init__(self, epoch: int, batch_index: int, instance_ids: Sequence[int], loss: float):
        self.epoch = epoch
        self.batch_index = batch_index
        self.instance_ids = list(instance_ids)
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch_index} "
            f"(instances {self.instance_ids})"
        )


class CheckpointError(TimeCheatError, RuntimeError):
    """Raised when a checkpoint cannot be written or read back."""
