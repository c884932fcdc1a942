"""Voxel grids: world/voxel mapping, trilinear sampling, distance transforms.

A volume stores scalar linear attenuation coefficients (1/mm) on an
(nx, ny, nz) lattice. Voxel index (i, j, k) sits at world position
``origin + index * spacing``; all positions are in mm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import _kernels
from .errors import EmptyStructureError


@dataclass(frozen=True)
class Volume:
    """Scalar voxel grid with physical spacing and world-space origin."""

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        spacing = np.asarray(self.spacing, dtype=np.float64)
        origin = np.asarray(self.origin, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if spacing.shape != (3,) or origin.shape != (3,):
            raise ValueError("spacing and origin must be 3-vectors")
        if not np.all(spacing > 0):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        if data.size and data.min() < 0:
            raise ValueError("attenuation values must be nonnegative")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume(self) -> float:
        """Physical volume of one voxel in mm^3."""
        return float(np.prod(self.spacing))

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel center, shape (M, 3).

        Rows run x-fastest, matching the on-disk payload order and the row
        order of discretized per-voxel fields (weights, warped coordinates).
        """
        nx, ny, nz = self.shape
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack(
            [ix.ravel(order="F"), iy.ravel(order="F"), iz.ravel(order="F")], axis=1
        ).astype(np.float64)
        return self.origin + idx * self.spacing


@dataclass(frozen=True)
class LabelMap:
    """Integer structure labels aligned with a volume; 0 is background."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"label map must be 3D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"label map must be integer-typed, got {labels.dtype}")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        object.__setattr__(self, "labels", labels)

    @property
    def num_structures(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def structure_ids(self) -> list[int]:
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i != 0]

    def mask(self, structure_id: int) -> np.ndarray:
        return self.labels == structure_id


@dataclass(frozen=True)
class DistanceField:
    """Minimum Euclidean distance (mm) from every voxel center to a structure."""

    values: np.ndarray
    structure_id: int


def world_to_voxel(vol: Volume, points: np.ndarray) -> np.ndarray:
    """Continuous voxel index of world points; inverse of voxel_to_world."""
    p = np.asarray(points, dtype=np.float64)
    return (p - vol.origin) / vol.spacing


def voxel_to_world(vol: Volume, indices: np.ndarray) -> np.ndarray:
    """World position of (possibly fractional) voxel indices."""
    i = np.asarray(indices, dtype=np.float64)
    return vol.origin + i * vol.spacing


def trilinear_sample(vol: Volume, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of the volume at world points.

    Outside the grid the volume is zero-padded: the interpolated value decays
    linearly to 0 across a one-voxel margin beyond the outermost centers, so
    the function stays continuous and compactly supported.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.ascontiguousarray(p.reshape(-1, 3))
    out = np.empty(p.shape[0])
    _kernels.trilinear_gather(vol.data, vol.origin, vol.spacing, p, out)
    return float(out[0]) if single else out


def trilinear_gradient(vol: Volume, points: np.ndarray) -> np.ndarray:
    """Spatial gradient (per mm) of :func:`trilinear_sample` at world points."""
    p = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    grad = np.empty_like(p)
    _kernels.trilinear_gather_grad(vol.data, vol.origin, vol.spacing, p, grad)
    return grad


def distance_transform(labels: LabelMap, vol: Volume, structure_id: int) -> DistanceField:
    """Exact anisotropic Euclidean distance (mm) to the given structure."""
    mask = labels.mask(structure_id)
    if not mask.any():
        raise EmptyStructureError(f"structure {structure_id} has no voxels")
    values = distance_transform_edt(~mask, sampling=vol.spacing)
    return DistanceField(values=values, structure_id=structure_id)


def structure_masses(labels: LabelMap, vol: Volume) -> np.ndarray:
    """Normalized structure masses (constant density): voxel count * voxel
    volume per structure, scaled to sum to 1."""
    k = labels.num_structures
    if k < 1:
        raise EmptyStructureError("label map contains no structures")
    counts = np.bincount(labels.labels.ravel(), minlength=k + 1)[1 : k + 1]
    if (counts == 0).any():
        empty = int(np.nonzero(counts == 0)[0][0]) + 1
        raise EmptyStructureError(f"structure {empty} has no voxels")
    masses = counts * vol.voxel_volume
    return masses / masses.sum()
