"""Numba kernels for the sampling-heavy inner loops.

Every parallel kernel writes each output element from exactly one loop
iteration (pure gathers), so results are bitwise independent of the thread
count. The one scatter kernel (the adjoint of rendering) runs serially.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _sample(data, n0, n1, n2, tx, ty, tz):
    """Zero-padded trilinear lookup at continuous voxel index (tx, ty, tz)."""
    if tx <= -1.0 or tx >= n0 or ty <= -1.0 or ty >= n1 or tz <= -1.0 or tz >= n2:
        return 0.0
    i0 = int(np.floor(tx))
    j0 = int(np.floor(ty))
    k0 = int(np.floor(tz))
    fx = tx - i0
    fy = ty - j0
    fz = tz - k0
    acc = 0.0
    for di in range(2):
        ii = i0 + di
        if ii < 0 or ii >= n0:
            continue
        wx = fx if di == 1 else 1.0 - fx
        for dj in range(2):
            jj = j0 + dj
            if jj < 0 or jj >= n1:
                continue
            wy = fy if dj == 1 else 1.0 - fy
            for dk in range(2):
                kk = k0 + dk
                if kk < 0 or kk >= n2:
                    continue
                wz = fz if dk == 1 else 1.0 - fz
                acc += data[ii, jj, kk] * wx * wy * wz
    return acc


@njit(cache=True, parallel=True)
def trilinear_gather(data, origin, spacing, points, out):
    """Sample ``data`` at world ``points`` (N, 3) into ``out`` (N,)."""
    n0, n1, n2 = data.shape
    for i in prange(points.shape[0]):
        tx = (points[i, 0] - origin[0]) / spacing[0]
        ty = (points[i, 1] - origin[1]) / spacing[1]
        tz = (points[i, 2] - origin[2]) / spacing[2]
        out[i] = _sample(data, n0, n1, n2, tx, ty, tz)


@njit(cache=True, parallel=True)
def trilinear_gather_grad(data, origin, spacing, points, grad):
    """Spatial gradient (d value / d world mm) of the zero-padded sampler."""
    n0, n1, n2 = data.shape
    for i in prange(points.shape[0]):
        tx = (points[i, 0] - origin[0]) / spacing[0]
        ty = (points[i, 1] - origin[1]) / spacing[1]
        tz = (points[i, 2] - origin[2]) / spacing[2]
        gx = 0.0
        gy = 0.0
        gz = 0.0
        if -1.0 < tx < n0 and -1.0 < ty < n1 and -1.0 < tz < n2:
            i0 = int(np.floor(tx))
            j0 = int(np.floor(ty))
            k0 = int(np.floor(tz))
            fx = tx - i0
            fy = ty - j0
            fz = tz - k0
            # Local 2x2x2 cube with zeros outside the grid.
            c = np.zeros((2, 2, 2))
            for di in range(2):
                ii = i0 + di
                if ii < 0 or ii >= n0:
                    continue
                for dj in range(2):
                    jj = j0 + dj
                    if jj < 0 or jj >= n1:
                        continue
                    for dk in range(2):
                        kk = k0 + dk
                        if kk < 0 or kk >= n2:
                            continue
                        c[di, dj, dk] = data[ii, jj, kk]
            gx = (
                (c[1, 0, 0] - c[0, 0, 0]) * (1 - fy) * (1 - fz)
                + (c[1, 1, 0] - c[0, 1, 0]) * fy * (1 - fz)
                + (c[1, 0, 1] - c[0, 0, 1]) * (1 - fy) * fz
                + (c[1, 1, 1] - c[0, 1, 1]) * fy * fz
            ) / spacing[0]
            gy = (
                (c[0, 1, 0] - c[0, 0, 0]) * (1 - fx) * (1 - fz)
                + (c[1, 1, 0] - c[1, 0, 0]) * fx * (1 - fz)
                + (c[0, 1, 1] - c[0, 0, 1]) * (1 - fx) * fz
                + (c[1, 1, 1] - c[1, 0, 1]) * fx * fz
            ) / spacing[1]
            gz = (
                (c[0, 0, 1] - c[0, 0, 0]) * (1 - fx) * (1 - fy)
                + (c[1, 0, 1] - c[1, 0, 0]) * fx * (1 - fy)
                + (c[0, 1, 1] - c[0, 1, 0]) * (1 - fx) * fy
                + (c[1, 1, 1] - c[1, 1, 0]) * fx * fy
            ) / spacing[2]
        grad[i, 0] = gx
        grad[i, 1] = gy
        grad[i, 2] = gz


@njit(cache=True, parallel=True)
def render_pixels(data, origin, spacing, source, targets, lams, out):
    """Quadrature line integrals from ``source`` to each of ``targets`` (N, 3).

    ``lams`` holds the quadrature nodes on [0, 1]; each carries weight
    1/len(lams). The result is ||target - source|| * mean of the samples.
    """
    n0, n1, n2 = data.shape
    mq = lams.shape[0]
    for i in prange(targets.shape[0]):
        dx = targets[i, 0] - source[0]
        dy = targets[i, 1] - source[1]
        dz = targets[i, 2] - source[2]
        length = np.sqrt(dx * dx + dy * dy + dz * dz)
        acc = 0.0
        for m in range(mq):
            lam = lams[m]
            tx = (source[0] + lam * dx - origin[0]) / spacing[0]
            ty = (source[1] + lam * dy - origin[1]) / spacing[1]
            tz = (source[2] + lam * dz - origin[2]) / spacing[2]
            acc += _sample(data, n0, n1, n2, tx, ty, tz)
        out[i] = acc * length / mq


@njit(cache=True)
def render_scatter_adjoint(g_pixels, origin, spacing, source, targets, lams, g_vol):
    """Adjoint of :func:`render_pixels`: spread pixel gradients into the volume.

    Serial on purpose: the scatter into ``g_vol`` must be deterministic.
    """
    n0, n1, n2 = g_vol.shape
    mq = lams.shape[0]
    for i in range(targets.shape[0]):
        dx = targets[i, 0] - source[0]
        dy = targets[i, 1] - source[1]
        dz = targets[i, 2] - source[2]
        length = np.sqrt(dx * dx + dy * dy + dz * dz)
        g = g_pixels[i] * length / mq
        if g == 0.0:
            continue
        for m in range(mq):
            lam = lams[m]
            tx = (source[0] + lam * dx - origin[0]) / spacing[0]
            ty = (source[1] + lam * dy - origin[1]) / spacing[1]
            tz = (source[2] + lam * dz - origin[2]) / spacing[2]
            if tx <= -1.0 or tx >= n0 or ty <= -1.0 or ty >= n1 or tz <= -1.0 or tz >= n2:
                continue
            i0 = int(np.floor(tx))
            j0 = int(np.floor(ty))
            k0 = int(np.floor(tz))
            fx = tx - i0
            fy = ty - j0
            fz = tz - k0
            for di in range(2):
                ii = i0 + di
                if ii < 0 or ii >= n0:
                    continue
                wx = fx if di == 1 else 1.0 - fx
                for dj in range(2):
                    jj = j0 + dj
                    if jj < 0 or jj >= n1:
                        continue
                    wy = fy if dj == 1 else 1.0 - fy
                    for dk in range(2):
                        kk = k0 + dk
                        if kk < 0 or kk >= n2:
                            continue
                        wz = fz if dk == 1 else 1.0 - fz
                        g_vol[ii, jj, kk] += g * wx * wy * wz


@njit(cache=True, parallel=True)
def render_pixels_affine(data, origin, spacing, source, targets, lams, affine, out):
    """Like :func:`render_pixels`, but each sample point is first mapped
    through the (3, 4) affine transform (the camera-perturbation trick)."""
    n0, n1, n2 = data.shape
    mq = lams.shape[0]
    for i in prange(targets.shape[0]):
        dx = targets[i, 0] - source[0]
        dy = targets[i, 1] - source[1]
        dz = targets[i, 2] - source[2]
        length = np.sqrt(dx * dx + dy * dy + dz * dz)
        acc = 0.0
        for m in range(mq):
            lam = lams[m]
            px = source[0] + lam * dx
            py = source[1] + lam * dy
            pz = source[2] + lam * dz
            qx = affine[0, 0] * px + affine[0, 1] * py + affine[0, 2] * pz + affine[0, 3]
            qy = affine[1, 0] * px + affine[1, 1] * py + affine[1, 2] * pz + affine[1, 3]
            qz = affine[2, 0] * px + affine[2, 1] * py + affine[2, 2] * pz + affine[2, 3]
            tx = (qx - origin[0]) / spacing[0]
            ty = (qy - origin[1]) / spacing[1]
            tz = (qz - origin[2]) / spacing[2]
            acc += _sample(data, n0, n1, n2, tx, ty, tz)
        out[i] = acc * length / mq


@njit(cache=True, parallel=True)
def camera_backward_partials(data, origin, spacing, source, targets, lams, affine, g_img, partials):
    """Per-pixel partials of d loss / d affine for the camera objective.

    For pixel p with image gradient g_img[p], accumulates
    sum_m g * grad V(T s_m) (x) [s_m, 1] into partials[p] (row-major 3x4).
    Summing the rows afterwards (in a fixed order) gives the deterministic
    contraction matrix regardless of thread count.
    """
    n0, n1, n2 = data.shape
    mq = lams.shape[0]
    for i in prange(targets.shape[0]):
        dx = targets[i, 0] - source[0]
        dy = targets[i, 1] - source[1]
        dz = targets[i, 2] - source[2]
        length = np.sqrt(dx * dx + dy * dy + dz * dz)
        g = g_img[i] * length / mq
        for k in range(12):
            partials[i, k] = 0.0
        if g == 0.0:
            continue
        for m in range(mq):
            lam = lams[m]
            px = source[0] + lam * dx
            py = source[1] + lam * dy
            pz = source[2] + lam * dz
            qx = affine[0, 0] * px + affine[0, 1] * py + affine[0, 2] * pz + affine[0, 3]
            qy = affine[1, 0] * px + affine[1, 1] * py + affine[1, 2] * pz + affine[1, 3]
            qz = affine[2, 0] * px + affine[2, 1] * py + affine[2, 2] * pz + affine[2, 3]
            tx = (qx - origin[0]) / spacing[0]
            ty = (qy - origin[1]) / spacing[1]
            tz = (qz - origin[2]) / spacing[2]
            if tx <= -1.0 or tx >= n0 or ty <= -1.0 or ty >= n1 or tz <= -1.0 or tz >= n2:
                continue
            i0 = int(np.floor(tx))
            j0 = int(np.floor(ty))
            k0 = int(np.floor(tz))
            fx = tx - i0
            fy = ty - j0
            fz = tz - k0
            c = np.zeros((2, 2, 2))
            for di in range(2):
                ii = i0 + di
                if ii < 0 or ii >= n0:
                    continue
                for dj in range(2):
                    jj = j0 + dj
                    if jj < 0 or jj >= n1:
                        continue
                    for dk in range(2):
                        kk = k0 + dk
                        if kk < 0 or kk >= n2:
                            continue
                        c[di, dj, dk] = data[ii, jj, kk]
            gx = (
                (c[1, 0, 0] - c[0, 0, 0]) * (1 - fy) * (1 - fz)
                + (c[1, 1, 0] - c[0, 1, 0]) * fy * (1 - fz)
                + (c[1, 0, 1] - c[0, 0, 1]) * (1 - fy) * fz
                + (c[1, 1, 1] - c[0, 1, 1]) * fy * fz
            ) / spacing[0] * g
            gy = (
                (c[0, 1, 0] - c[0, 0, 0]) * (1 - fx) * (1 - fz)
                + (c[1, 1, 0] - c[1, 0, 0]) * fx * (1 - fz)
                + (c[0, 1, 1] - c[0, 0, 1]) * (1 - fx) * fz
                + (c[1, 1, 1] - c[1, 0, 1]) * fx * fz
            ) / spacing[1] * g
            gz = (
                (c[0, 0, 1] - c[0, 0, 0]) * (1 - fx) * (1 - fy)
                + (c[1, 0, 1] - c[1, 0, 0]) * fx * (1 - fy)
                + (c[0, 1, 1] - c[0, 1, 0]) * (1 - fx) * fy
                + (c[1, 1, 1] - c[1, 1, 0]) * fx * fy
            ) / spacing[2] * g
            partials[i, 0] += gx * px
            partials[i, 1] += gx * py
            partials[i, 2] += gx * pz
            partials[i, 3] += gx
            partials[i, 4] += gy * px
            partials[i, 5] += gy * py
            partials[i, 6] += gy * pz
            partials[i, 7] += gy
            partials[i, 8] += gz * px
            partials[i, 9] += gz * py
            partials[i, 10] += gz * pz
            partials[i, 11] += gz


@njit(cache=True, parallel=True)
def exp_apply(twists, points, out):
    """Row-wise SE(3) exponential applied to matched points, without
    materializing the 4x4 matrices. Same series switch as liealg."""
    for i in prange(twists.shape[0]):
        wx = twists[i, 0]
        wy = twists[i, 1]
        wz = twists[i, 2]
        ux = twists[i, 3]
        uy = twists[i, 4]
        uz = twists[i, 5]
        theta2 = wx * wx + wy * wy + wz * wz
        theta = np.sqrt(theta2)
        if theta < 1e-4:
            a = 1.0 - theta2 / 6.0
            b = 0.5 - theta2 / 24.0
            c = 1.0 / 6.0 - theta2 / 120.0
        else:
            half = 0.5 * theta
            sh = np.sin(half) / half
            a = np.sin(theta) / theta
            b = 0.5 * sh * sh
            c = (theta - np.sin(theta)) / (theta2 * theta)
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        rx = (
            (1.0 - b * (wy * wy + wz * wz)) * px
            + (b * wx * wy - a * wz) * py
            + (b * wx * wz + a * wy) * pz
        )
        ry = (
            (b * wx * wy + a * wz) * px
            + (1.0 - b * (wx * wx + wz * wz)) * py
            + (b * wy * wz - a * wx) * pz
        )
        rz = (
            (b * wx * wz - a * wy) * px
            + (b * wy * wz + a * wx) * py
            + (1.0 - b * (wx * wx + wy * wy)) * pz
        )
        tx = (
            (1.0 - c * (wy * wy + wz * wz)) * ux
            + (c * wx * wy - b * wz) * uy
            + (c * wx * wz + b * wy) * uz
        )
        ty = (
            (c * wx * wy + b * wz) * ux
            + (1.0 - c * (wx * wx + wz * wz)) * uy
            + (c * wy * wz - b * wx) * uz
        )
        tz = (
            (c * wx * wz - b * wy) * ux
            + (c * wy * wz + b * wx) * uy
            + (1.0 - c * (wx * wx + wy * wy)) * uz
        )
        out[i, 0] = rx + tx
        out[i, 1] = ry + ty
        out[i, 2] = rz + tz
