"""Exception types shared across the package."""


class TernKBError(Exception):
    pass


class ConfigError(TernKBError, ValueError):
    """Shapes, schemas or options that do not fit together."""


class DataError(TernKBError, ValueError):
    """Malformed or out-of-range input data."""


class TrainingError(TernKBError, RuntimeError):
    """Optimisation diverged or produced non-finite values."""


class FormatError(TernKBError, ValueError):
    """Corrupt or truncated binary file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MetricError(TernKBError, ValueError):
    """Metric undefined for the given inputs."""
