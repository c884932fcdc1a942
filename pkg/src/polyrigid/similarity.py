"""Image similarity for registration (NCC family, gmNCC) and evaluation
metrics (Dice, 95th-percentile Hausdorff distance).

The registration loss gmNCC is the average of multiscale NCC (global NCC
averaged with patch-wise NCC) and the same multiscale NCC computed on
Sobel gradient-magnitude images. Zero-variance images and patches score 0
rather than NaN so the optimizer always receives finite losses.

Private ``*_with_grad`` variants also return the derivative of the score
with respect to the second image; they back the registration gradients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial.distance import cdist

from .errors import ConstantImageWarning

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


@dataclass(frozen=True)
class PatchSpec:
    """Patch grid for local NCC: odd patch edge (pixels) and stride."""

    patch_size: int = 13
    stride: int = 13

    def __post_init__(self):
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd and >= 3, got {self.patch_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")


def _as_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _ncc_with_grad(a: np.ndarray, b: np.ndarray):
    """Global NCC and its gradient with respect to ``b``.

    Constant inputs (max == min exactly) are gated to score 0 with zero
    gradient; the gate is exact, so denormal variances never amplify noise.
    """
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        return 0.0, np.zeros_like(b)
    az = a - a.mean()
    bz = b - b.mean()
    na = np.sqrt((az * az).sum())
    nb = np.sqrt((bz * bz).sum())
    num = (az * bz).sum()
    score = num / (na * nb)
    grad = az / (na * nb) - (num / (na * nb * nb * nb)) * bz
    # NCC is invariant to constant shifts of b; project out the drift.
    grad -= grad.mean()
    return float(score), grad


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean, unit-variance correlation over all pixels, in [-1, 1]."""
    a, b = _as_pair(a, b)
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        warnings.warn("constant image scored 0 by NCC", ConstantImageWarning)
        return 0.0
    return _ncc_with_grad(a, b)[0]


def _patch_starts(extent: int, patch: int, stride: int):
    return range(0, extent - patch + 1, stride)


def _local_ncc_with_grad(a: np.ndarray, b: np.ndarray, patch: PatchSpec):
    ps, stride = patch.patch_size, patch.stride
    h, w = a.shape
    if h < ps or w < ps:
        raise ValueError(f"image {a.shape} is smaller than the patch size {ps}")
    grad = np.zeros_like(b)
    total = 0.0
    count = 0
    for r in _patch_starts(h, ps, stride):
        for c in _patch_starts(w, ps, stride):
            s, g = _ncc_with_grad(a[r : r + ps, c : c + ps], b[r : r + ps, c : c + ps])
            total += s
            grad[r : r + ps, c : c + ps] += g
            count += 1
    return total / count, grad / count


def local_ncc(a: np.ndarray, b: np.ndarray, patch: PatchSpec) -> float:
    """Mean NCC over the patch grid; constant patches contribute 0."""
    a, b = _as_pair(a, b)
    return _local_ncc_with_grad(a, b, patch)[0]


def _multiscale_with_grad(a: np.ndarray, b: np.ndarray, patch: PatchSpec):
    s_g, g_g = _ncc_with_grad(a, b)
    s_l, g_l = _local_ncc_with_grad(a, b, patch)
    return 0.5 * (s_g + s_l), 0.5 * (g_g + g_l)


def multiscale_ncc(a: np.ndarray, b: np.ndarray, patch: PatchSpec) -> float:
    """Average of global NCC and patch-local NCC."""
    a, b = _as_pair(a, b)
    return _multiscale_with_grad(a, b, patch)[0]


def _pad_reflect(img: np.ndarray) -> np.ndarray:
    return np.pad(img, 1, mode="reflect")


def _pad_reflect_adjoint(p: np.ndarray) -> np.ndarray:
    """Adjoint of 1-pixel reflect padding: fold borders back inside."""
    q = p[:, 1:-1].copy()
    q[:, 1] += p[:, 0]
    q[:, -2] += p[:, -1]
    g = q[1:-1, :].copy()
    g[1, :] += q[0, :]
    g[-2, :] += q[-1, :]
    return g


def _correlate3(padded: np.ndarray, kernel: np.ndarray, h: int, w: int) -> np.ndarray:
    out = np.zeros((h, w))
    for u in range(3):
        for v in range(3):
            k = kernel[u, v]
            if k != 0.0:
                out += k * padded[u : u + h, v : v + w]
    return out


def _correlate3_adjoint(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = g.shape
    p = np.zeros((h + 2, w + 2))
    for u in range(3):
        for v in range(3):
            k = kernel[u, v]
            if k != 0.0:
                p[u : u + h, v : v + w] += k * g
    return _pad_reflect_adjoint(p)


def sobel_magnitude(img: np.ndarray) -> np.ndarray:
    """Gradient magnitude from 3x3 Sobel kernels on a reflect-padded image."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    padded = _pad_reflect(img)
    gx = _correlate3(padded, SOBEL_X, h, w)
    gy = _correlate3(padded, SOBEL_Y, h, w)
    return np.hypot(gx, gy)


def _sobel_forward(img: np.ndarray):
    h, w = img.shape
    padded = _pad_reflect(img)
    gx = _correlate3(padded, SOBEL_X, h, w)
    gy = _correlate3(padded, SOBEL_Y, h, w)
    return gx, gy, np.hypot(gx, gy)


def _gradient_ncc_with_grad(a: np.ndarray, b: np.ndarray, patch: PatchSpec):
    mag_a = sobel_magnitude(a)
    gx, gy, mag_b = _sobel_forward(b)
    score, g_mag = _multiscale_with_grad(mag_a, mag_b, patch)
    # Chain through the magnitude (zero slope where the magnitude vanishes)
    # and the Sobel correlations.
    safe = np.where(mag_b > 0.0, mag_b, 1.0)
    scale = np.where(mag_b > 0.0, g_mag / safe, 0.0)
    grad = _correlate3_adjoint(scale * gx, SOBEL_X) + _correlate3_adjoint(scale * gy, SOBEL_Y)
    return score, grad


def gradient_ncc(a: np.ndarray, b: np.ndarray, patch: PatchSpec) -> float:
    """Multiscale NCC on Sobel gradient-magnitude images."""
    a, b = _as_pair(a, b)
    return _multiscale_with_grad(sobel_magnitude(a), sobel_magnitude(b), patch)[0]


def _gmncc_with_grad(a: np.ndarray, b: np.ndarray, patch: PatchSpec):
    s_m, g_m = _multiscale_with_grad(a, b, patch)
    s_g, g_g = _gradient_ncc_with_grad(a, b, patch)
    return 0.5 * (s_m + s_g), 0.5 * (g_m + g_g)


def gmncc(a: np.ndarray, b: np.ndarray, patch: PatchSpec) -> float:
    """Registration loss: average of multiscale NCC and gradient NCC."""
    a, b = _as_pair(a, b)
    return _gmncc_with_grad(a, b, patch)[0]


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap coefficient 2|a & b| / (|a| + |b|); two empty masks score 1."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def _boundary_points(mask: np.ndarray) -> np.ndarray:
    boundary = mask & ~binary_erosion(mask)
    return np.argwhere(boundary)


def hd95(a: np.ndarray, b: np.ndarray, spacing) -> float:
    """95th-percentile symmetric boundary distance in mm.

    Boundaries are the masks minus their erosions; the percentile over each
    directed distance set uses linear interpolation, and the result is the
    larger of the two directions.
    """
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("hd95 requires both masks to be nonempty")
    spacing = np.asarray(spacing, dtype=np.float64)
    pa = _boundary_points(a) * spacing
    pb = _boundary_points(b) * spacing
    d = cdist(pa, pb)
    forward = np.percentile(d.min(axis=1), 95)
    backward = np.percentile(d.min(axis=0), 95)
    return float(max(forward, backward))
