"""Exception hierarchy shared by every module."""


class SemTrackError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SemTrackError, ValueError):
    pass


class ShapeError(SemTrackError, ValueError):
    pass


class InputError(SemTrackError, ValueError):
    pass


class StateError(SemTrackError, RuntimeError):
    pass


class CompatibilityError(SemTrackError):
    pass


class FormatError(SemTrackError):
    pass
