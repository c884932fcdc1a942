"""Synthetic articulated phantoms: volumes, disjoint structure labels,
ground-truth polyrigid deformations, and multi-view X-ray sets.

Primitives are rasterized at voxel centers on a cubic grid centered on the
world origin. The committed presets keep registration runs at desk scale:

* ``femur-pair``: a pelvis-like anchor box plus two mirrored capsules.
* ``neck``: a skull ellipsoid plus three vertebra boxes.
* ``unequal``: one large and one small box, for weight-function comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from .geometry import CameraMatrix, CameraPose, IntrinsicMeta
from .grid import LabelMap, Volume
from .registration import View
from .render import QuadratureSpec, default_quadrature, render_drr
from .warpfield import PolyrigidField, WeightMode, build_weights, warp_labels, warp_volume


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    attenuation: float


@dataclass(frozen=True)
class Capsule:
    start: tuple[float, float, float]
    end: tuple[float, float, float]
    radius: float
    attenuation: float


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semiaxes: tuple[float, float, float]
    attenuation: float


@dataclass(frozen=True)
class Composite:
    """Union of primitives rasterized as one structure (one label id)."""

    parts: tuple
    attenuation: float


@dataclass(frozen=True)
class PhantomSpec:
    """Grid geometry plus a list of shape primitives to rasterize.

    ``texture_amplitude`` modulates the background with a smooth random
    field (drawn from ``seed``), standing in for soft-tissue texture; dense
    texture is what gives the similarity loss its capture range away from
    bone edges.
    """

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    structures: tuple
    background: float = 0.0
    texture_amplitude: float = 0.0
    texture_scale_mm: float = 12.0
    bone_texture_amplitude: float = 0.0
    bone_texture_scale_mm: float = 8.0
    seed: int = 0

    def grid_origin(self) -> np.ndarray:
        n = np.asarray(self.shape, dtype=np.float64)
        s = np.asarray(self.spacing, dtype=np.float64)
        return -(n - 1.0) / 2.0 * s


def _signed_distance(structure, points: np.ndarray) -> np.ndarray:
    """Signed distance (mm) to the primitive surface, negative inside."""
    if isinstance(structure, Composite):
        d = _signed_distance(structure.parts[0], points)
        for part in structure.parts[1:]:
            d = np.minimum(d, _signed_distance(part, points))
        return d
    if isinstance(structure, Box):
        c = np.asarray(structure.center)
        half = np.asarray(structure.size) / 2.0
        q = np.abs(points - c) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside
    if isinstance(structure, Ellipsoid):
        c = np.asarray(structure.center)
        a = np.asarray(structure.semiaxes)
        # First-order surface distance; adequate for a one-voxel ramp.
        k0 = np.linalg.norm((points - c) / a, axis=1)
        k1 = np.linalg.norm((points - c) / (a * a), axis=1)
        return np.where(k1 > 0, k0 * (k0 - 1.0) / np.maximum(k1, 1e-12), -a.min())
    if isinstance(structure, Capsule):
        p0 = np.asarray(structure.start, dtype=np.float64)
        p1 = np.asarray(structure.end, dtype=np.float64)
        axis = p1 - p0
        t = np.clip((points - p0) @ axis / (axis @ axis), 0.0, 1.0)
        closest = p0 + t[:, None] * axis
        return np.linalg.norm(points - closest, axis=1) - structure.radius
    raise TypeError(f"unknown structure primitive {type(structure).__name__}")


def _inside(structure, points: np.ndarray) -> np.ndarray:
    return _signed_distance(structure, points) <= 0.0


def make_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    """Rasterize the spec: background everywhere, structure k labelled k.

    Attenuations blend linearly over a one-voxel ramp at each surface
    (partial-volume smoothing, as in a real band-limited CT); labels are
    binary at the 50% occupancy surface. Raises ValueError if any two
    structures overlap or touch (the presets keep at least one voxel of
    separation).
    """
    nx, ny, nz = spec.shape
    origin = spec.grid_origin()
    spacing = np.asarray(spec.spacing, dtype=np.float64)
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    points = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1) * spacing + origin

    rng = np.random.default_rng(spec.seed)
    data = np.full(spec.shape, float(spec.background))
    if spec.texture_amplitude > 0.0 and spec.background > 0.0:
        noise = gaussian_filter(rng.standard_normal(spec.shape), spec.texture_scale_mm / spacing)
        noise /= noise.std()
        data *= 1.0 + spec.texture_amplitude * np.clip(noise, -2.5, 2.5)
    bone_field = None
    if spec.bone_texture_amplitude > 0.0:
        noise = gaussian_filter(
            rng.standard_normal(spec.shape), spec.bone_texture_scale_mm / spacing
        )
        noise /= noise.std()
        bone_field = 1.0 + spec.bone_texture_amplitude * np.clip(noise, -2.5, 2.5)
    labels = np.zeros(spec.shape, dtype=np.uint16)
    masks = []
    ramp = 2.0 * float(np.mean(spacing))
    for sid, structure in enumerate(spec.structures, start=1):
        if structure.attenuation < 0:
            raise ValueError("attenuation must be nonnegative")
        sdf = _signed_distance(structure, points).reshape(spec.shape)
        occupancy = np.clip(0.5 - sdf / ramp, 0.0, 1.0)
        mask = sdf <= 0.0
        masks.append(mask)
        value = structure.attenuation if bone_field is None else structure.attenuation * bone_field
        data = (1.0 - occupancy) * data + occupancy * value
        labels[mask] = sid
    for i in range(len(masks)):
        grown = binary_dilation(masks[i], structure=np.ones((3, 3, 3), bool))
        for j in range(i + 1, len(masks)):
            if (grown & masks[j]).any():
                raise ValueError(f"structures {i + 1} and {j + 1} overlap or touch")
    return (
        Volume(data=data, spacing=spacing, origin=origin),
        LabelMap(labels=labels),
    )


def _femur(side: float, bone: float) -> Composite:
    """Capsule shaft plus an angled neck knob; the knob breaks the axial
    symmetry so spin about the shaft is observable in projections."""
    return Composite(
        parts=(
            Capsule(
                start=(side * 44.0, 0.0, 12.0),
                end=(side * 46.0, 6.0, -78.0),
                radius=12.0,
                attenuation=bone,
            ),
            Capsule(
                start=(side * 44.0, 0.0, 12.0),
                end=(side * 30.0, -6.0, 17.0),
                radius=7.0,
                attenuation=bone,
            ),
        ),
        attenuation=bone,
    )


def femur_pair(n: int = 64) -> PhantomSpec:
    """Pelvis-like anchor box and two mirrored femurs on a 256 mm cube."""
    s = 256.0 / n
    bone = 0.06
    return PhantomSpec(
        shape=(n, n, n),
        spacing=(s, s, s),
        structures=(
            Box(center=(0.0, 0.0, 66.0), size=(130.0, 90.0, 52.0), attenuation=0.075),
            _femur(-1.0, bone),
            _femur(+1.0, bone),
        ),
        background=0.012,
        texture_amplitude=0.25,
        bone_texture_amplitude=0.2,
        bone_texture_scale_mm=6.0,
    )


def neck(n: int = 64) -> PhantomSpec:
    """Skull ellipsoid and three vertebra boxes."""
    s = 256.0 / n
    bone = 0.06
    return PhantomSpec(
        shape=(n, n, n),
        spacing=(s, s, s),
        structures=(
            Ellipsoid(center=(0.0, 0.0, 62.0), semiaxes=(45.0, 38.0, 30.0), attenuation=bone),
            Box(center=(0.0, 0.0, 8.0), size=(26.0, 22.0, 14.0), attenuation=bone),
            Box(center=(0.0, 0.0, -24.0), size=(26.0, 22.0, 14.0), attenuation=bone),
            Box(center=(0.0, 0.0, -56.0), size=(26.0, 22.0, 14.0), attenuation=bone),
        ),
        background=0.012,
        texture_amplitude=0.25,
        bone_texture_amplitude=0.15,
    )


def unequal(n: int = 64) -> PhantomSpec:
    """One large and one small box with very different masses."""
    s = 256.0 / n
    bone = 0.06
    return PhantomSpec(
        shape=(n, n, n),
        spacing=(s, s, s),
        structures=(
            Box(center=(0.0, 0.0, 30.0), size=(100.0, 60.0, 50.0), attenuation=bone),
            Box(center=(0.0, 0.0, -45.0), size=(24.0, 24.0, 24.0), attenuation=bone),
        ),
        background=0.012,
        texture_amplitude=0.25,
        bone_texture_amplitude=0.15,
    )


PRESETS = {"femur-pair": femur_pair, "neck": neck, "unequal": unequal}

DEFAULT_SOURCE_TO_ISO = 1000.0


def default_detector(n_pixels: int = 128, pixel_mm: float = 2.0) -> IntrinsicMeta:
    return IntrinsicMeta(
        focal_length=1300.0,
        optical_center=(0.0, 0.0),
        pixel_spacing=(pixel_mm, pixel_mm),
        image_size=(n_pixels, n_pixels),
    )


def orbit_pose(
    angle_deg: float,
    center: np.ndarray,
    source_to_iso: float = DEFAULT_SOURCE_TO_ISO,
) -> CameraPose:
    """Camera on a circular orbit around the world z axis, aimed at ``center``.

    The detector row axis follows -z (patient axis up in the image).
    """
    phi = np.deg2rad(angle_deg)
    center = np.asarray(center, dtype=np.float64)
    source = center + source_to_iso * np.array([np.cos(phi), np.sin(phi), 0.0])
    forward = (center - source) / np.linalg.norm(center - source)
    down = np.array([0.0, 0.0, -1.0])
    right = np.cross(down, forward)
    right /= np.linalg.norm(right)
    rotation = np.stack([right, down, forward])
    translation = -rotation @ source
    return CameraPose(rotation=rotation, translation=translation)


def orbit_angles(view_count: int, arc_degrees: float) -> np.ndarray:
    """Evenly spaced angles spanning the arc, endpoints included."""
    if view_count < 1:
        raise ValueError("need at least one view")
    if not (0.0 < arc_degrees <= 360.0):
        raise ValueError(f"arc must lie in (0, 360], got {arc_degrees!r}")
    if view_count == 1:
        return np.array([0.0])
    return arc_degrees * np.arange(view_count) / (view_count - 1)


@dataclass(frozen=True)
class GroundTruthCase:
    """A phantom, its true deformation, and views rendered from the warped
    volume; the registration target with known answers."""

    moving: Volume
    labels: LabelMap
    true_twists: np.ndarray
    views: list[View]
    true_warped_labels: LabelMap
    weight_mode: WeightMode


def make_case(
    spec: PhantomSpec,
    twists: np.ndarray,
    view_count: int,
    arc_degrees: float,
    weight_mode: WeightMode | None = None,
    meta: IntrinsicMeta | None = None,
    quadrature: QuadratureSpec | None = None,
    source_to_iso: float = DEFAULT_SOURCE_TO_ISO,
) -> GroundTruthCase:
    """Build a ground-truth registration case.

    Cameras sit on an even arc around the volume center; every view is a
    render of the ground-truth-warped volume.
    """
    weight_mode = weight_mode if weight_mode is not None else WeightMode()
    meta = meta if meta is not None else default_detector()
    vol, labels = make_phantom(spec)
    quadrature = quadrature if quadrature is not None else default_quadrature(vol)
    twists = np.asarray(twists, dtype=np.float64)
    weights = build_weights(labels, vol, weight_mode)
    fieldw = PolyrigidField(twists=twists, weights=weights)
    warped = warp_volume(vol, fieldw)
    warped_labels = warp_labels(labels, vol, fieldw)

    center = vol.origin + (np.asarray(vol.shape) - 1) / 2.0 * vol.spacing
    views = []
    for angle in orbit_angles(view_count, arc_degrees):
        pose = orbit_pose(angle, center, source_to_iso)
        camera = CameraMatrix.compose(meta, pose)
        image = render_drr(warped, camera, meta, quadrature)
        views.append(View(image=image, camera=camera, meta=meta))
    return GroundTruthCase(
        moving=vol,
        labels=labels,
        true_twists=twists,
        views=views,
        true_warped_labels=warped_labels,
        weight_mode=weight_mode,
    )


def random_twists(
    count: int, max_angle: float, max_translation: float, seed: int
) -> np.ndarray:
    """Uniformly random twists with |omega| <= max_angle and |u| <= max_translation."""
    rng = np.random.default_rng(seed)
    def _ball(k, radius):
        direction = rng.normal(size=(k, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radii = radius * rng.random(k) ** (1.0 / 3.0)
        return direction * radii[:, None]
    return np.hstack([_ball(count, max_angle), _ball(count, max_translation)])
