"""Exception types shared across the package."""


class BonesynthError(Exception):
    """Base class for all errors raised by bonesynth."""


class ValidationError(BonesynthError, ValueError):
    """Inputs violate a documented precondition (CLI exit code 2)."""


class NoBoneContentError(BonesynthError):
    """No voxel exceeds the bone threshold in one of the registration inputs."""

    def __init__(self, message: str = "no bone content"):
        super().__init__(message)


class DivergedError(BonesynthError):
    """The registration loss became non-finite."""

    def __init__(self, message: str = "diverged"):
        super().__init__(message)


class UndefinedMetricError(ValidationError):
    """A metric is mathematically undefined for the given inputs."""
