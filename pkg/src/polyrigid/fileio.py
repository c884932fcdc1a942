"""On-disk formats: PVOL1/PLAB1/PIMG1/PWRP1 binaries, twist files, camera
configs, and registration manifests.

Binary layouts (all little-endian):

* ``PVOL1 nx ny nz sx sy sz ox oy oz\\n`` + nx*ny*nz float32, x-fastest.
* ``PLAB1`` with the same header and layout, uint16 payload.
* ``PIMG1 h w\\n`` + h*w float32, row-major.
* ``PWRP1 nx ny nz\\n`` + (nx*ny*nz, 3) float32, x-fastest voxel order.

Text files use ``key = value`` lines with ``#`` comments. Floats are written
with ``repr`` so that write(read(f)) reproduces our files byte-exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FileFormatError
from .geometry import CameraPose, IntrinsicMeta
from .grid import LabelMap, Volume
from .similarity import PatchSpec
from .warpfield import WeightMode


def _fmt(x: float) -> str:
    return repr(float(x))


def _split_header(raw: bytes, magic: bytes, path) -> tuple[list[bytes], int]:
    nl = raw.find(b"\n")
    if nl < 0:
        raise FileFormatError(f"{path}: no header line found (byte offset 0)")
    tokens = raw[:nl].split()
    if not tokens or tokens[0] != magic:
        found = tokens[0].decode("ascii", "replace") if tokens else ""
        raise FileFormatError(
            f"{path}: bad magic {found!r} at byte offset 0, expected {magic.decode()!r}"
        )
    return tokens[1:], nl + 1


def _parse_ints(tokens, count, path):
    if len(tokens) < count:
        raise FileFormatError(f"{path}: header too short at byte offset 0")
    try:
        return [int(t) for t in tokens[:count]]
    except ValueError as e:
        raise FileFormatError(f"{path}: malformed header at byte offset 0: {e}") from e


def _parse_floats(tokens, count, path):
    if len(tokens) < count:
        raise FileFormatError(f"{path}: header too short at byte offset 0")
    try:
        return [float(t) for t in tokens[:count]]
    except ValueError as e:
        raise FileFormatError(f"{path}: malformed header at byte offset 0: {e}") from e


def _check_payload(raw: bytes, start: int, expected: int, path) -> bytes:
    payload = raw[start:]
    if len(payload) < expected:
        raise FileFormatError(
            f"{path}: truncated payload at byte offset {start + len(payload)}, "
            f"expected {expected} payload bytes"
        )
    if len(payload) > expected:
        raise FileFormatError(
            f"{path}: {len(payload) - expected} trailing bytes at byte offset {start + expected}"
        )
    return payload


def _check_finite(values: np.ndarray, start: int, itemsize: int, path):
    bad = np.nonzero(~np.isfinite(values))[0]
    if bad.size:
        offset = start + int(bad[0]) * itemsize
        raise FileFormatError(f"{path}: non-finite value at byte offset {offset}")


def write_volume(path, vol: Volume) -> None:
    nx, ny, nz = vol.shape
    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin
    header = (
        f"PVOL1 {nx} {ny} {nz} {_fmt(sx)} {_fmt(sy)} {_fmt(sz)} "
        f"{_fmt(ox)} {_fmt(oy)} {_fmt(oz)}\n"
    ).encode("ascii")
    payload = vol.data.astype("<f4").ravel(order="F").tobytes()
    Path(path).write_bytes(header + payload)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    tokens, start = _split_header(raw, b"PVOL1", path)
    nx, ny, nz = _parse_ints(tokens, 3, path)
    sx, sy, sz, ox, oy, oz = _parse_floats(tokens[3:], 6, path)
    payload = _check_payload(raw, start, nx * ny * nz * 4, path)
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    _check_finite(flat, start, 4, path)
    data = flat.reshape((nx, ny, nz), order="F")
    return Volume(data=data, spacing=(sx, sy, sz), origin=(ox, oy, oz))


def write_labels(path, labels: LabelMap, spacing, origin) -> None:
    if labels.labels.size and int(labels.labels.max()) >= 2**16:
        raise ValueError("labels do not fit in 16 bits")
    nx, ny, nz = labels.labels.shape
    sx, sy, sz = np.asarray(spacing, dtype=np.float64)
    ox, oy, oz = np.asarray(origin, dtype=np.float64)
    header = (
        f"PLAB1 {nx} {ny} {nz} {_fmt(sx)} {_fmt(sy)} {_fmt(sz)} "
        f"{_fmt(ox)} {_fmt(oy)} {_fmt(oz)}\n"
    ).encode("ascii")
    payload = labels.labels.astype("<u2").ravel(order="F").tobytes()
    Path(path).write_bytes(header + payload)


def read_labels(path) -> tuple[LabelMap, np.ndarray, np.ndarray]:
    """Read a label map; returns (labels, spacing, origin)."""
    raw = Path(path).read_bytes()
    tokens, start = _split_header(raw, b"PLAB1", path)
    nx, ny, nz = _parse_ints(tokens, 3, path)
    sx, sy, sz, ox, oy, oz = _parse_floats(tokens[3:], 6, path)
    payload = _check_payload(raw, start, nx * ny * nz * 2, path)
    flat = np.frombuffer(payload, dtype="<u2")
    data = flat.reshape((nx, ny, nz), order="F").astype(np.uint16)
    return LabelMap(labels=data), np.array([sx, sy, sz]), np.array([ox, oy, oz])


def write_image(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be 2D, got shape {img.shape}")
    h, w = img.shape
    header = f"PIMG1 {h} {w}\n".encode("ascii")
    Path(path).write_bytes(header + img.astype("<f4").tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, start = _split_header(raw, b"PIMG1", path)
    h, w = _parse_ints(tokens, 2, path)
    payload = _check_payload(raw, start, h * w * 4, path)
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    _check_finite(flat, start, 4, path)
    return flat.reshape(h, w)


def write_warp(path, coords: np.ndarray, shape) -> None:
    nx, ny, nz = shape
    c = np.asarray(coords, dtype=np.float64)
    if c.shape != (nx * ny * nz, 3):
        raise ValueError(f"expected ({nx * ny * nz}, 3) coordinates, got {c.shape}")
    header = f"PWRP1 {nx} {ny} {nz}\n".encode("ascii")
    Path(path).write_bytes(header + c.astype("<f4").tobytes())


def read_warp(path) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Read a warped-coordinate field; returns ((M, 3) coords, grid shape)."""
    raw = Path(path).read_bytes()
    tokens, start = _split_header(raw, b"PWRP1", path)
    nx, ny, nz = _parse_ints(tokens, 3, path)
    payload = _check_payload(raw, start, nx * ny * nz * 12, path)
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    _check_finite(flat, start, 4, path)
    return flat.reshape(-1, 3), (nx, ny, nz)


def write_twists(path, twists: np.ndarray) -> None:
    t = np.asarray(twists, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != 6:
        raise ValueError(f"twists must be (K, 6), got shape {t.shape}")
    lines = [" ".join(_fmt(x) for x in row) for row in t]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_twists(path) -> np.ndarray:
    rows = []
    for ln, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise FileFormatError(f"{path}:{ln}: expected 6 values per twist line")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as e:
            raise FileFormatError(f"{path}:{ln}: {e}") from e
    if not rows:
        raise FileFormatError(f"{path}: no twists found")
    t = np.array(rows)
    if not np.all(np.isfinite(t)):
        raise FileFormatError(f"{path}: non-finite twist components")
    return t


def write_matrix(path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix, dtype=np.float64)
    lines = [" ".join(_fmt(x) for x in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_kv_pairs(path) -> list[tuple[str, str]]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    pairs = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise FileFormatError(f"{path}:{ln}: expected 'key = value', got {body!r}")
        key, value = body.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


CAMERA_KEYS = (
    "focal_length_mm",
    "optical_center_mm",
    "pixel_spacing_mm",
    "image_hw",
    "rotation_rowmajor9",
    "translation_mm",
)


def write_camera_config(path, meta: IntrinsicMeta, pose: CameraPose) -> None:
    r = pose.rotation.ravel()
    t = pose.translation
    lines = [
        f"focal_length_mm = {_fmt(meta.focal_length)}",
        f"optical_center_mm = {_fmt(meta.optical_center[0])} {_fmt(meta.optical_center[1])}",
        f"pixel_spacing_mm = {_fmt(meta.pixel_spacing[0])} {_fmt(meta.pixel_spacing[1])}",
        f"image_hw = {meta.image_size[0]} {meta.image_size[1]}",
        "rotation_rowmajor9 = " + " ".join(_fmt(x) for x in r),
        "translation_mm = " + " ".join(_fmt(x) for x in t),
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_camera_config(path) -> tuple[IntrinsicMeta, CameraPose]:
    values = {}
    for key, value in read_kv_pairs(path):
        if key not in CAMERA_KEYS:
            raise FileFormatError(f"{path}: unknown camera config key {key!r}")
        values[key] = value
    for key in CAMERA_KEYS:
        if key not in values:
            raise FileFormatError(f"{path}: missing camera config key {key!r}")
    try:
        focal = float(values["focal_length_mm"])
        oc = tuple(float(x) for x in values["optical_center_mm"].split())
        ps = tuple(float(x) for x in values["pixel_spacing_mm"].split())
        hw = tuple(int(x) for x in values["image_hw"].split())
        r9 = [float(x) for x in values["rotation_rowmajor9"].split()]
        t3 = [float(x) for x in values["translation_mm"].split()]
    except ValueError as e:
        raise FileFormatError(f"{path}: malformed camera config value: {e}") from e
    if len(oc) != 2 or len(ps) != 2 or len(hw) != 2 or len(r9) != 9 or len(t3) != 3:
        raise FileFormatError(f"{path}: camera config value has the wrong arity")
    meta = IntrinsicMeta(
        focal_length=focal, optical_center=oc, pixel_spacing=ps, image_size=hw
    )
    pose = CameraPose(rotation=np.array(r9).reshape(3, 3), translation=np.array(t3))
    return meta, pose


OPTIM_KEYS = {
    "step_rot": float,
    "step_xyz": float,
    "max_iters": int,
    "convergence_window": int,
    "convergence_tol": float,
    "gradient_mode": str,
}


@dataclass(frozen=True)
class Manifest:
    """Parsed registration manifest: data paths plus optional overrides."""

    volume: Path
    labels: Path
    weight_mode: WeightMode
    views: tuple[tuple[Path, Path], ...]
    optim_overrides: dict
    quadrature: int | None
    patch: PatchSpec | None


def read_manifest(path) -> Manifest:
    base = Path(path).parent
    fields: dict[str, str] = {}
    views: list[tuple[Path, Path]] = []
    for key, value in read_kv_pairs(path):
        if key == "view":
            parts = value.split()
            if len(parts) != 2:
                raise FileFormatError(f"{path}: view entries need '<image> <camera>', got {value!r}")
            views.append((base / parts[0], base / parts[1]))
        else:
            fields[key] = value

    for required in ("volume", "labels"):
        if required not in fields:
            raise FileFormatError(f"{path}: missing manifest key {required!r}")
    if not views:
        raise FileFormatError(f"{path}: missing manifest key 'view' (need at least one)")

    volume = base / fields.pop("volume")
    labels = base / fields.pop("labels")
    for key, p in [("volume", volume), ("labels", labels)] + [
        ("view", p) for pair in views for p in pair
    ]:
        if not os.path.exists(p):
            raise FileFormatError(f"{path}: manifest key {key!r} points to a missing file: {p}")

    variant = fields.pop("weight_mode", "mass")
    epsilon = float(fields.pop("epsilon", "1.0"))
    try:
        weight_mode = WeightMode(variant=variant, epsilon=epsilon)
    except ValueError as e:
        raise FileFormatError(f"{path}: {e}") from e

    quadrature = None
    if "quadrature" in fields:
        quadrature = int(fields.pop("quadrature"))
    patch = None
    if "patch_size" in fields or "patch_stride" in fields:
        size = int(fields.pop("patch_size", "13"))
        stride = int(fields.pop("patch_stride", str(size)))
        patch = PatchSpec(patch_size=size, stride=stride)

    overrides = {}
    for key, value in fields.items():
        if key not in OPTIM_KEYS:
            raise FileFormatError(f"{path}: unknown manifest key {key!r}")
        try:
            overrides[key] = OPTIM_KEYS[key](value)
        except ValueError as e:
            raise FileFormatError(f"{path}: malformed value for {key!r}: {e}") from e

    return Manifest(
        volume=volume,
        labels=labels,
        weight_mode=weight_mode,
        views=tuple(views),
        optim_overrides=overrides,
        quadrature=quadrature,
        patch=patch,
    )


def write_loss_history(path, history) -> None:
    lines = ["iteration,loss"] + [f"{i},{_fmt(x)}" for i, x in enumerate(history)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
