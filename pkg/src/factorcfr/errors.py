"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


class SchemaError(ValueError):
    """A data file does not follow the expected column layout."""


class DataLoadError(RuntimeError):
    """A dataset file is missing or unreadable."""


class SplitError(ValueError):
    """A requested split produces an empty partition."""


class NumericError(FloatingPointError):
    """A loss term became NaN or infinite; the message names the term."""


class UnsupportedMetricError(ValueError):
    """The metric is undefined for the given data (missing ground truth or group)."""


class TrainingDiverged(RuntimeError):
    """Total loss became non-finite; carries the history recorded so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
