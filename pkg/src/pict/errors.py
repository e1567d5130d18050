class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit code 2."""


class DataError(RuntimeError):
    """Missing or malformed dataset; the CLI maps it to exit code 3."""


class LoadError(RuntimeError):
    """Checkpoint cannot be loaded under the requested configuration."""


class TrainingDiverged(FloatingPointError):
    """A non-finite loss appeared during training."""
