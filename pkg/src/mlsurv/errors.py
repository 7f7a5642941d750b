"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid shapes, hyperparameters or settings."""


class DimensionError(ValueError):
    """Array shapes that do not conform."""


class DataError(ValueError):
    """Malformed or missing input data."""


class UsageError(RuntimeError):
    """API called in a way it does not support."""


class CheckpointError(RuntimeError):
    pass


class UndefinedMetricError(ValueError):
    """A metric has no defined value on the given data."""


class TrainingError(RuntimeError):
    pass
