"""Exception hierarchy shared by every module."""


class DVMError(Exception):
    """Base class for all errors raised by dvmnerf."""


class ValidationError(DVMError, ValueError):
    """Invalid input or configuration. The CLI maps these to exit code 1."""


class PointAtOpticCentre(ValidationError):
    pass


class NonPositiveDepth(ValidationError):
    pass


class InvalidCount(ValidationError):
    pass


class CoincidentCentres(ValidationError):
    pass


class DegenerateBaseline(ValidationError):
    """Baseline parallel to the reference viewing direction."""


class SingularIntrinsics(ValidationError):
    pass


class SingularWarp(ValidationError):
    pass


class NotRectified(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class InvalidRange(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class MissingField(ValidationError):
    pass


class MalformedMatrix(ValidationError):
    pass


class ImageDecodeError(ValidationError):
    pass


class CheckpointVersionError(ValidationError):
    pass
