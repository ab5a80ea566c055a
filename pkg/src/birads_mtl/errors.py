"""Exception hierarchy shared by every module."""


class BiradsError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BiradsError, ValueError):
    pass


class InvalidSpecError(InvalidInputError):
    pass


class UnsupportedGraphError(BiradsError):
    pass


class UninitializedNormalizerError(BiradsError, RuntimeError):
    pass


class UndefinedMetricError(BiradsError, ValueError):
    pass


class InsufficientDataError(BiradsError, ValueError):
    pass


class ConfigError(BiradsError, ValueError):
    pass
