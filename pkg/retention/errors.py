"""Exception types raised by the retention package."""


class DevSafeError(ValueError):
    """Base class for every error raised by the library."""


class ShapeError(DevSafeError):
    """Input dimensions do not match the model or operation."""


class DegenerateInputError(DevSafeError):
    """A pre-normalization vector has (near) zero norm."""


class EstimatorError(DevSafeError):
    """An estimator was asked to average over an empty set."""


class ConfigError(DevSafeError):
    """Invalid configuration value; `field` holds the dotted path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DivergenceError(DevSafeError):
    """Non-finite or exploding values during a solver run."""

    def __init__(self, message: str, checkpoint_path: str | None = None):
        if checkpoint_path:
            message = f"{message} (last checkpoint: {checkpoint_path})"
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class ParseError(DevSafeError):
    """Malformed scenario, parameter or checkpoint file."""

    def __init__(self, path: str, message: str, line: int | None = None, field: str | None = None):
        location = path
        if line is not None:
            location += f":{line}"
        if field is not None:
            location += f" [{field}]"
        super().__init__(f"{location}: {message}")
        self.path = path
        self.line = line
        self.field = field


class MetricError(DevSafeError):
    """A metric was requested on empty or invalid evaluation data."""


class GenerationError(DevSafeError):
    """A scenario cannot be generated from the requested spec."""


class PreconditionError(DevSafeError):
    """A documented precondition of a diagnostic does not hold."""


class InvariantError(DevSafeError):
    """Internal invariant violation (indicates a bug)."""
