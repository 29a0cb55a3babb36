"""Exception taxonomy shared across the package."""


class MrcfitError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(MrcfitError):
    """Inputs whose shapes or counts do not line up."""


class PoseDegeneracy(DimensionMismatch):
    """A view set with duplicate camera poses; the reconstruction is underdetermined."""


class NoForeground(MrcfitError):
    """An image with no pixel below the foreground threshold."""


class BboxOutOfBounds(MrcfitError):
    """A bounding box that does not fit inside the image."""


class TooSmall(MrcfitError):
    """An image too small for the requested multi-scale evaluation."""


class SizeTooLarge(MrcfitError):
    """A patch larger than the image it should be placed in."""


class NonPositiveSigma(MrcfitError):
    """A Gaussian policy step with sigma <= 0; the density does not exist."""


class NonFiniteGradient(MrcfitError):
    """A NaN or infinity in a parameter gradient."""


class EmptyDataset(MrcfitError):
    """A training call with no samples."""


class EmptyCatalog(MrcfitError):
    """A prompt catalog with no entries."""


class MismatchedBatch(MrcfitError):
    """Batch inputs of unequal length."""


class InvalidIntensities(MrcfitError):
    """A distortion intensity grid that is not strictly increasing from zero."""


class MissingPrerequisite(MrcfitError):
    """A pipeline stage invoked before the stage it depends on."""


class ConfigError(MrcfitError):
    """An unknown, missing, or ill-typed run-config key."""
