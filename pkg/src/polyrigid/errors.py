"""Exception types shared across the package."""


class PolyrigidError(Exception):
    """Base class for all package errors."""


class InvalidMetadataError(PolyrigidError):
    """Camera metadata violates its invariants (non-positive focal length, spacing, ...)."""


class SingularCameraError(PolyrigidError):
    """Camera matrix is rank-deficient and cannot be back-projected."""


class InvalidTransformError(PolyrigidError):
    """Matrix is not a valid rigid transform (non-orthonormal rotation, bad bottom row)."""


class NearPiRotationError(PolyrigidError):
    """Rotation angle is within tolerance of pi, where the log map is ill-conditioned."""


class EmptyStructureError(PolyrigidError):
    """A labelled structure has no voxels."""


class UnknownStructureError(PolyrigidError):
    """A structure id is absent from the label map."""


class FileFormatError(PolyrigidError):
    """On-disk payload is malformed; message names the byte offset where parsing failed."""


class NumericalFailureError(PolyrigidError):
    """Optimization produced a non-finite loss or diverged.

    Carries the loss history accumulated up to the failure for diagnosis.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class ConstantImageWarning(UserWarning):
    """A zero-variance image was scored 0 by an NCC-family metric."""
