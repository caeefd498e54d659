"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor or volume shapes are incompatible with the requested operation."""


class ConfigurationError(ValueError):
    """A configuration value is invalid or inconsistent."""


class UsageError(RuntimeError):
    """An API was called in a state it does not support."""


class VolumeFormatError(ValueError):
    """A volume file is malformed; carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointFormatError(ValueError):
    """A checkpoint file is malformed; carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. empty surface)."""


class NumericError(RuntimeError):
    """Training or evaluation produced a non-finite value."""
