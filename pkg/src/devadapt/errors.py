"""Exception types shared across the toolkit."""


class DevAdaptError(Exception):
    """Base class for toolkit errors."""


class InvalidInputError(DevAdaptError, ValueError):
    pass


class ConfigurationError(DevAdaptError, ValueError):
    pass


class ParseError(DevAdaptError, ValueError):
    """Malformed recording filename. ``field`` names the offending part."""

    def __init__(self, message: str, field: str):
        super().__init__(message)
        self.field = field


class CorpusIntegrityError(DevAdaptError):
    pass


class InvalidModeError(DevAdaptError, ValueError):
    pass


class ContractViolation(DevAdaptError):
    pass


class TrainingDiverged(DevAdaptError, RuntimeError):
    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
