"""Pinhole X-ray camera model: intrinsics, extrinsics, and back-projected rays.

Conventions
-----------
* World units are millimeters; rotations are plain orthonormal matrices.
* Pixel (i, j) means row i, column j; its center enters the projection math
  as the homogeneous coordinate (j + 0.5, i + 0.5, 1), so the x axis of the
  intrinsic matrix runs along image width and y along height.
* The optical center of the machine metadata is in mm on the detector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import InvalidMetadataError, SingularCameraError

# A camera matrix whose 3x3 pixel block has a singular value below this is
# treated as rank-deficient and cannot be back-projected.
RANK_TOLERANCE = 1e-10


@dataclass(frozen=True)
class IntrinsicMeta:
    """X-ray machine metadata needed to build the intrinsic matrix.

    focal_length: source-to-detector distance (mm).
    optical_center: detector-plane offset of the principal point (mm).
    pixel_spacing: detector pixel pitch (mm/pixel), (x, y) order.
    image_size: (height, width) in pixels.
    """

    focal_length: float
    optical_center: tuple[float, float]
    pixel_spacing: tuple[float, float]
    image_size: tuple[int, int]

    def __post_init__(self):
        if not self.focal_length > 0:
            raise InvalidMetadataError(f"focal length must be positive, got {self.focal_length!r}")
        if not (self.pixel_spacing[0] > 0 and self.pixel_spacing[1] > 0):
            raise InvalidMetadataError(f"pixel spacing must be positive, got {self.pixel_spacing!r}")
        h, w = self.image_size
        if int(h) != h or int(w) != w or h < 2 or w < 2:
            raise InvalidMetadataError(f"image size must be integers >= 2, got {self.image_size!r}")


def build_intrinsics(meta: IntrinsicMeta) -> np.ndarray:
    """Intrinsic matrix as the product of the pixel-mapping and image-mapping factors."""
    f = float(meta.focal_length)
    ox, oy = meta.optical_center
    sx, sy = meta.pixel_spacing
    h, w = meta.image_size
    pixel_map = np.array(
        [
            [1.0 / sx, 0.0, w / 2.0],
            [0.0, 1.0 / sy, h / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )
    image_map = np.array(
        [
            [f, 0.0, ox],
            [0.0, f, oy],
            [0.0, 0.0, 1.0],
        ]
    )
    return pixel_map @ image_map


@dataclass(frozen=True)
class CameraPose:
    """Extrinsic [R | t]: maps world coordinates into the camera frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidMetadataError("pose needs a 3x3 rotation and a 3-vector translation")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidMetadataError("rotation must be orthonormal with determinant 1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def extrinsic(self) -> np.ndarray:
        """The 3x4 [R | t] block."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def matrix4(self) -> np.ndarray:
        """The 4x4 homogeneous world-to-camera transform."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def source_position(pose: CameraPose) -> np.ndarray:
    """World position of the X-ray source (camera center), -R^T t."""
    return -pose.rotation.T @ pose.translation


@dataclass(frozen=True)
class CameraMatrix:
    """Composed camera: intrinsic K, pose [R | t], their 3x4 product, and f (mm).

    Build through :meth:`compose`, which also records the focal length needed
    to place back-projected detector points at metric distance.
    """

    intrinsic: np.ndarray
    pose: CameraPose
    matrix: np.ndarray
    focal_length: float

    @classmethod
    def compose(cls, meta: IntrinsicMeta, pose: CameraPose) -> "CameraMatrix":
        k = build_intrinsics(meta)
        return cls(
            intrinsic=k,
            pose=pose,
            matrix=k @ pose.extrinsic(),
            focal_length=float(meta.focal_length),
        )

    def validate(self) -> None:
        if self.intrinsic[0, 0] <= 0 or self.intrinsic[1, 1] <= 0:
            raise InvalidMetadataError("intrinsic matrix must have a positive diagonal")
        recomposed = self.intrinsic @ self.pose.extrinsic()
        if np.abs(recomposed - self.matrix).max() > 1e-9:
            raise InvalidMetadataError("camera matrix does not equal intrinsic @ extrinsic")


@dataclass(frozen=True)
class Ray:
    """Line segment from the X-ray source to a point on the detector plane."""

    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.source, dtype=np.float64)
        t = np.asarray(self.target, dtype=np.float64)
        if np.array_equal(s, t):
            raise ValueError("ray source and target coincide")
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "target", t)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.target - self.source))


@dataclass(frozen=True)
class RayGrid:
    """One back-projected ray per pixel: a shared source and (H, W, 3) targets."""

    source: np.ndarray
    targets: np.ndarray

    @property
    def count(self) -> int:
        return self.targets.shape[0] * self.targets.shape[1]

    def __iter__(self) -> Iterator[Ray]:
        flat = self.targets.reshape(-1, 3)
        for t in flat:
            yield Ray(self.source, t)


def project_point(camera: CameraMatrix, point: np.ndarray) -> np.ndarray:
    """Project a world point to pixel coordinates (px, py)."""
    h = camera.matrix @ np.append(np.asarray(point, dtype=np.float64), 1.0)
    if abs(h[2]) < 1e-300:
        raise SingularCameraError("point projects to infinity (on the principal plane)")
    return h[:2] / h[2]


def _backproject_directions(camera: CameraMatrix, pixels_h: np.ndarray) -> np.ndarray:
    """Solve the pixel block of the camera matrix for world ray directions.

    ``pixels_h`` is (3, N) homogeneous pixel coordinates; returns (N, 3)
    directions d with (K R) d = p_h, found by least squares. Raises
    SingularCameraError when the block is rank-deficient.
    """
    block = camera.matrix[:, :3]
    directions, _, _, singular = np.linalg.lstsq(block, pixels_h, rcond=None)
    if singular.size < 3 or singular[-1] < RANK_TOLERANCE:
        raise SingularCameraError(
            f"camera pixel block is rank-deficient (smallest singular value "
            f"{0.0 if singular.size < 3 else singular[-1]:.3e})"
        )
    return directions.T


def detector_point(camera: CameraMatrix, pixel: np.ndarray) -> np.ndarray:
    """World position on the detector plane hit by the ray through ``pixel``.

    The homogeneous pixel is back-projected to a world direction and placed
    at focal-length distance along the principal axis, i.e.
    ``P = S + f * (K R)^{-1} p_h``. Projecting P through the camera recovers
    the pixel exactly.
    """
    p = np.asarray(pixel, dtype=np.float64)
    ph = np.array([[p[0]], [p[1]], [1.0]])
    d = _backproject_directions(camera, ph)[0]
    return source_position(camera.pose) + camera.focal_length * d


def pixel_rays(camera: CameraMatrix, meta: IntrinsicMeta) -> RayGrid:
    """Back-projected ray for every pixel center of the detector."""
    h, w = meta.image_size
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    px = jj.ravel() + 0.5
    py = ii.ravel() + 0.5
    pixels_h = np.vstack([px, py, np.ones_like(px)])
    directions = _backproject_directions(camera, pixels_h)
    source = source_position(camera.pose)
    targets = source + camera.focal_length * directions
    if np.linalg.norm(targets - source, axis=1).min() <= 0:
        raise SingularCameraError("degenerate ray of zero length")
    return RayGrid(source=source, targets=targets.reshape(h, w, 3))
