"""Exception hierarchy shared across the package."""


class MilHardError(Exception):
    """Base class for all package errors."""


class ConfigError(MilHardError, ValueError):
    """A configuration value is out of range. ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class BagFormatError(MilHardError, ValueError):
    """A bag file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


class DimensionError(MilHardError, ValueError):
    """Array shapes or feature dimensions disagree."""


class EmptyPoolError(MilHardError):
    """Hard-negative pool is empty; caller should skip augmentation."""


class TrainingError(MilHardError, RuntimeError):
    """Training diverged (non-finite loss)."""
