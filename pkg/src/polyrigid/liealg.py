"""Closed-form exponential and logarithm maps between SE(3) and se(3).

Twists are length-6 arrays ``[wx, wy, wz, ux, uy, uz]``: the first three
components generate the rotation (radians), the last three the translation
(mm). Rigid transforms are 4x4 matrices with an orthonormal rotation block,
a translation column, and an exact ``(0, 0, 0, 1)`` bottom row. A stack of
K twists is a plain (K, 6) array.

All math is float64. The rotation coefficients switch to Taylor expansions
below ``theta = 1e-4``, where the closed forms lose digits to cancellation.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidTransformError, NearPiRotationError

# Angle below which the sin/cos coefficient ratios use Taylor expansions.
SMALL_ANGLE = 1e-4

# Rotations closer than this to a half turn are rejected by the log map.
PI_EXCLUSION = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector, so that skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=np.float64)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def _rotation_coeffs(theta2: np.ndarray):
    """Coefficients A, B, C of the exp map and D of the inverse translation mixer.

    A = sin(t)/t, B = (1-cos(t))/t^2, C = (t-sin(t))/t^3,
    D = (1 - (t/2)cot(t/2))/t^2, each evaluated elementwise from t^2.
    B uses the half-angle form and D the cotangent form; both avoid the
    catastrophic cancellation of the textbook expressions near zero.
    """
    theta2 = np.asarray(theta2, dtype=np.float64)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    # Guard the denominators; the guarded lanes are overwritten below.
    t = np.where(small, 1.0, theta)
    t2 = np.where(small, 1.0, theta2)
    half = 0.5 * t
    sin_half = np.sin(half)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - theta2 / 24.0, 0.5 * (sin_half / half) ** 2)
    c = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (t - np.sin(t)) / (t2 * t))
    d = np.where(
        small,
        1.0 / 12.0 + theta2 / 720.0,
        (1.0 - half * np.cos(half) / sin_half) / t2,
    )
    return a, b, c, d


def batched_exp(twists: np.ndarray) -> np.ndarray:
    """Exponential map applied row-wise to an (M, 6) twist stack.

    Returns an (M, 4, 4) array of rigid transforms. Every entry is assembled
    from elementwise expressions, so row i is bitwise identical to
    ``se3_exp(twists[i])`` regardless of the batch size.
    """
    v = np.asarray(twists, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 6:
        raise ValueError(f"expected an (M, 6) twist stack, got shape {v.shape}")
    w = v[:, 0:3]
    u = v[:, 3:6]
    wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
    theta2 = wx * wx + wy * wy + wz * wz
    a, b, c, _ = _rotation_coeffs(theta2)

    out = np.zeros((v.shape[0], 4, 4))
    # R = I + A [w]x + B [w]x^2 with [w]x^2 = w w^T - theta^2 I.
    out[:, 0, 0] = 1.0 - b * (wy * wy + wz * wz)
    out[:, 0, 1] = b * wx * wy - a * wz
    out[:, 0, 2] = b * wx * wz + a * wy
    out[:, 1, 0] = b * wx * wy + a * wz
    out[:, 1, 1] = 1.0 - b * (wx * wx + wz * wz)
    out[:, 1, 2] = b * wy * wz - a * wx
    out[:, 2, 0] = b * wx * wz - a * wy
    out[:, 2, 1] = b * wy * wz + a * wx
    out[:, 2, 2] = 1.0 - b * (wx * wx + wy * wy)
    # t = Omega u, Omega = I + B [w]x + C [w]x^2.
    o00 = 1.0 - c * (wy * wy + wz * wz)
    o01 = c * wx * wy - b * wz
    o02 = c * wx * wz + b * wy
    o10 = c * wx * wy + b * wz
    o11 = 1.0 - c * (wx * wx + wz * wz)
    o12 = c * wy * wz - b * wx
    o20 = c * wx * wz - b * wy
    o21 = c * wy * wz + b * wx
    o22 = 1.0 - c * (wx * wx + wy * wy)
    out[:, 0, 3] = o00 * u[:, 0] + o01 * u[:, 1] + o02 * u[:, 2]
    out[:, 1, 3] = o10 * u[:, 0] + o11 * u[:, 1] + o12 * u[:, 2]
    out[:, 2, 3] = o20 * u[:, 0] + o21 * u[:, 1] + o22 * u[:, 2]
    out[:, 3, 3] = 1.0
    return out


def se3_exp(twist: np.ndarray) -> np.ndarray:
    """Exponential map of a single twist; returns a 4x4 rigid transform."""
    v = np.asarray(twist, dtype=np.float64)
    if v.shape != (6,):
        raise ValueError(f"expected a length-6 twist, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("twist has non-finite components")
    return batched_exp(v[np.newaxis, :])[0]


def validate_rigid(matrix: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Check the rigid-transform invariants and return the matrix as float64.

    Raises InvalidTransformError if the rotation block is not orthonormal
    with determinant 1 (tolerance ``atol``) or the bottom row is not exactly
    (0, 0, 0, 1).
    """
    t = np.asarray(matrix, dtype=np.float64)
    if t.shape != (4, 4):
        raise InvalidTransformError(f"expected a 4x4 matrix, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise InvalidTransformError("transform has non-finite entries")
    if not np.array_equal(t[3], [0.0, 0.0, 0.0, 1.0]):
        raise InvalidTransformError(f"bottom row must be (0, 0, 0, 1), got {t[3]}")
    r = t[:3, :3]
    ortho = np.abs(r.T @ r - np.eye(3)).max()
    if ortho > atol:
        raise InvalidTransformError(f"rotation block is not orthonormal (|R^T R - I| = {ortho:.3e})")
    det = np.linalg.det(r)
    if abs(det - 1.0) > atol:
        raise InvalidTransformError(f"rotation block has determinant {det!r}, expected 1")
    return t


def se3_log(matrix: np.ndarray) -> np.ndarray:
    """Logarithm map of a rigid transform; returns the canonical-branch twist.

    The rotation angle is recovered with atan2 from the off-diagonal
    differences and the trace, which stays accurate down to theta = 0. Angles
    within ``PI_EXCLUSION`` of pi are rejected (NearPiRotationError): the
    axis is not recoverable from the antisymmetric part there, and callers
    are expected to re-parameterize instead.
    """
    t = validate_rigid(matrix)
    r = t[:3, :3]
    rvec = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_theta = 0.5 * np.linalg.norm(rvec)
    cos_theta = 0.5 * (np.trace(r) - 1.0)
    theta = np.arctan2(sin_theta, cos_theta)
    if np.pi - theta < PI_EXCLUSION:
        raise NearPiRotationError(
            f"rotation angle {theta!r} is within {PI_EXCLUSION} of pi; "
            "the log map is ill-conditioned there"
        )
    if theta < SMALL_ANGLE:
        factor = 0.5 * (1.0 + theta * theta / 6.0)
    else:
        factor = 0.5 * theta / sin_theta
    omega = factor * rvec

    theta2 = omega @ omega
    _, _, _, d = _rotation_coeffs(np.array(theta2))
    k = skew(omega)
    omega_inv = np.eye(3) - 0.5 * k + float(d) * (k @ k)
    u = omega_inv @ t[:3, 3]
    return np.concatenate([omega, u])


def validate_twist(twist: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Check the canonical-branch twist invariants (finite, |omega| <= pi)."""
    v = np.asarray(twist, dtype=np.float64)
    if v.shape != (6,):
        raise ValueError(f"expected a length-6 twist, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("twist has non-finite components")
    norm = np.linalg.norm(v[:3])
    if norm > np.pi + atol:
        raise ValueError(f"|omega| = {norm!r} exceeds pi; not on the canonical branch")
    return v


def transform_points(matrices: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply rigid transforms to points.

    ``matrices`` is (4, 4) or (M, 4, 4); ``points`` is (N, 3) or (M, 3)
    matched row-to-row in the batched case.
    """
    m = np.asarray(matrices, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    if m.ndim == 2:
        return p @ m[:3, :3].T + m[:3, 3]
    return np.einsum("mij,mj->mi", m[:, :3, :3], p) + m[:, :3, 3]
