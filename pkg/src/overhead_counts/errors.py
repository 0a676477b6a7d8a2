"""Exception hierarchy for overhead-counts."""


class OverheadCountsError(Exception):
    """Base class for every error raised by this package."""
    pass


class ParameterError(OverheadCountsError, ValueError):
    """Raised when an argument is outside its valid range."""
    pass


class ConfigError(OverheadCountsError, ValueError):
    """Raised when a configuration is inconsistent or names an unknown option."""
    pass


class InputError(OverheadCountsError, ValueError):
    """Raised when a raw detection record is invalid."""
    pass


class DatasetFormatError(OverheadCountsError, ValueError):
    """Raised when a dataset record cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DatasetFormatError):
    """Raised when a record parses but violates the dataset schema."""
    pass


class DomainError(OverheadCountsError, ValueError):
    """Raised when a distribution parameter is outside its domain."""
    pass


class NumericError(OverheadCountsError, ArithmeticError):
    """Raised when a value that must be finite is not."""
    pass


class ShapeError(OverheadCountsError, ValueError):
    """Raised when array shapes do not agree."""
    pass


class StateError(OverheadCountsError, RuntimeError):
    """Raised when an operation needs state that is missing or stale."""
    pass


class CheckpointError(OverheadCountsError):
    """Raised when a checkpoint cannot be read (version mismatch, corrupt payload)."""
    pass


class TrainingError(OverheadCountsError):
    """Raised when training cannot continue, e.g. a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message)


class RenderError(OverheadCountsError, ValueError):
    """Raised when a raster cannot be rendered."""
    pass
