class ConfigurationError(ValueError):
    """Invalid physical or experiment configuration."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""


class TrainingDivergence(RuntimeError):
    """Raised when a training loss becomes non-finite."""


class SchemaError(ValueError):
    """Experiment config file failed schema validation."""

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = list(keys)
