class SslcmError(Exception):
    """Base class for every error raised by this package."""


class ActivationFormatError(SslcmError):
    pass


class BadMagicError(ActivationFormatError):
    pass


class TruncatedPayloadError(ActivationFormatError):
    pass


class DimensionError(ActivationFormatError):
    pass


class NonFiniteError(ActivationFormatError):
    pass


class ManifestError(SslcmError):
    """Malformed manifest or score file; message carries the line number."""


class DuplicateIdError(ManifestError):
    pass


class ShapeError(SslcmError):
    pass


class NumericalError(SslcmError):
    """A non-finite value appeared during a computation."""


class TrainingError(SslcmError):
    pass


class EvaluationError(SslcmError):
    pass


class FusionError(SslcmError):
    pass


class ConfigError(SslcmError):
    pass
