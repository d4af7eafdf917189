"""Exception types shared across the package."""


class LatentPoisonError(Exception):
    """Base class for all package errors."""


class BadMagic(LatentPoisonError):
    pass


class TruncatedPayload(LatentPoisonError):
    pass


class MissingFile(LatentPoisonError):
    pass


class ShapeMismatch(LatentPoisonError, ValueError):
    pass


class NonFiniteGradient(LatentPoisonError, FloatingPointError):
    pass


class NonFiniteLoss(LatentPoisonError, FloatingPointError):
    pass


class VersionMismatch(LatentPoisonError):
    pass


class CorruptFile(LatentPoisonError):
    pass


class EmptyClass(LatentPoisonError, ValueError):
    pass


class InvalidClass(LatentPoisonError, ValueError):
    pass


class EmptyInput(LatentPoisonError, ValueError):
    pass


class ConfigError(LatentPoisonError, ValueError):
    pass


class MissingCheckpoint(LatentPoisonError):
    pass


class BlackBoxViolation(LatentPoisonError, RuntimeError):
    """Raised when attack code tries to obtain gradients from the test classifier."""
