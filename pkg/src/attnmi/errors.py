"""Exception hierarchy shared across the package."""


class AttnMIError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AttnMIError, ValueError):
    """Invalid configuration, shapes or arguments."""


class ShapeError(ConfigurationError):
    pass


class InvalidInputError(AttnMIError, ValueError):
    """Input data violates an operation's precondition."""


class TrainingError(AttnMIError, RuntimeError):
    pass


class IngestionError(AttnMIError, ValueError):
    pass


class AnalysisError(AttnMIError, ValueError):
    pass
