"""Exception hierarchy. Each family maps onto one CLI exit code."""


class DroidZeroError(Exception):
    exit_code = 1


class ConfigError(DroidZeroError):
    exit_code = 2


class DependencyError(DroidZeroError):
    """An upstream artifact is missing; ``producer`` names the command that makes it."""

    exit_code = 3

    def __init__(self, message, producer=None):
        super().__init__(message)
        self.producer = producer


class ValidationError(DroidZeroError):
    exit_code = 4


class ShapeError(ValidationError):
    pass


class StateError(ValidationError):
    pass


class NumericError(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class EmptyVocabularyError(ValidationError):
    pass


class EmptyGraphError(ValidationError):
    pass


class SamplingError(ValidationError):
    pass


class FormatError(ValidationError):
    """Persisted artifact has the wrong format tag, version or vocabulary hash."""
