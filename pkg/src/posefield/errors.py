"""Exception types raised across the package."""


class PoseFieldError(Exception):
    """Base class for all package-specific errors."""


class DegenerateRotation(PoseFieldError):
    """6D rotation embedding cannot be orthonormalized (zero or parallel columns)."""


class NotARotation(PoseFieldError):
    """Matrix fails the orthonormality / determinant checks for SO(3)."""


class DegenerateLookAt(PoseFieldError):
    """Look-at construction is ill-posed (coincident points or parallel up/forward)."""


class NonMonotonicDepths(PoseFieldError):
    """Sample depths along a ray are not strictly increasing."""


class ShapeMismatch(PoseFieldError):
    """Input tensor has the wrong shape for the operation."""


class ScaleTooLarge(PoseFieldError):
    """Dynamic patch scale does not fit inside the image."""


class ImageTooSmall(PoseFieldError):
    """Image is below the minimum size the operation supports."""


class OutOfBounds(PoseFieldError):
    """Patch coordinates fall outside the image domain."""


class NaNAbort(PoseFieldError):
    """A training sub-step produced non-finite parameters."""

    def __init__(self, substep: str, iteration: int):
        self.substep = substep
        self.iteration = iteration
        super().__init__(f"non-finite parameters after '{substep}' at iteration {iteration}")


class DegenerateConfiguration(PoseFieldError):
    """Pose set is too small or collinear for similarity alignment."""


class MissingFile(PoseFieldError):
    """Dataset path or required file does not exist."""


class SchemaError(PoseFieldError):
    """Dataset metadata file does not match the expected schema."""


class InconsistentImageSizes(PoseFieldError):
    """Images in a dataset do not share one size or channel count."""


class NoMaskSource(PoseFieldError):
    """Dataset has neither mask images nor an alpha channel to derive masks from."""


class EmptyLevelSet(PoseFieldError):
    """Density threshold lies above the maximum sampled density."""


class CorruptCheckpoint(PoseFieldError):
    """Checkpoint file is truncated or fails integrity checks."""


class VersionMismatch(PoseFieldError):
    """Checkpoint version or config hash does not match the running config."""
