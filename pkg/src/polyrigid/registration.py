"""Joint pose optimization over structure twists and anchor-based camera
refinement.

The registration objective builds a polyrigid field from K candidate twists
and the precomputed weight field, pull-back warps the moving volume, renders
every view, and scores the mean gmNCC against the observed images. It is
maximized with Adam using separate step sizes for the rotational and
translational twist components.

Gradients come in two flavors:

* ``fd``: central finite differences of the objective (step 1e-4 rad for
  rotation components, 1e-2 mm for translation components).
* ``adjoint``: a hand-chained reverse pass (similarity gradient, scatter
  through the renderer, trilinear spatial gradients, per-voxel exponential
  Jacobians). Roughly 20x faster at typical sizes and agrees with ``fd`` to
  the finite-difference contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import _kernels
from .errors import NumericalFailureError, UnknownStructureError
from .geometry import CameraMatrix, CameraPose, IntrinsicMeta, pixel_rays
from .grid import LabelMap, Volume, trilinear_gradient, trilinear_sample
from .liealg import _rotation_coeffs, batched_exp, se3_exp, transform_points
from .render import QuadratureSpec, default_quadrature, masked_volume
from .similarity import PatchSpec, _gmncc_with_grad, gmncc
from .warpfield import WeightField, WeightMode, build_weights, _grid_centers

FD_STEP_ROT = 1e-4
FD_STEP_XYZ = 1e-2
# Step for the internal finite differences of the exponential map itself
# (a smooth analytic function, so a much smaller step is appropriate).
EXP_JACOBIAN_STEP = 1e-5


@dataclass(frozen=True)
class View:
    """One observed X-ray: the image, its camera, and the machine metadata."""

    image: np.ndarray
    camera: CameraMatrix
    meta: IntrinsicMeta


@dataclass(frozen=True)
class OptimConfig:
    """Adam configuration with per-block step sizes for (omega, u)."""

    step_rot: float = 1e-2
    step_xyz: float = 1e0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_iters: int = 250
    convergence_window: int = 25
    convergence_tol: float = 1e-5
    gradient_mode: str = "adjoint"

    def __post_init__(self):
        if not (self.step_rot > 0 and self.step_xyz > 0):
            raise ValueError("step sizes must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.gradient_mode not in ("adjoint", "fd"):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")

    def step_vector(self) -> np.ndarray:
        return np.array([self.step_rot] * 3 + [self.step_xyz] * 3)


@dataclass(frozen=True)
class PoseEstimate:
    """Optimization result: best-loss twists, loss trace, convergence flag."""

    twists: np.ndarray
    loss_history: list[float]
    converged: bool

    def transforms(self) -> np.ndarray:
        """Per-structure rigid transforms, shape (K, 4, 4)."""
        return batched_exp(self.twists)


class RegistrationProblem:
    """A moving volume, its structure labels, and the observed views.

    The weight field and the per-view ray geometry are precomputed here:
    both stay fixed during optimization.
    """

    def __init__(
        self,
        moving: Volume,
        labels: LabelMap,
        weight_mode: WeightMode,
        views: list[View],
        quadrature: QuadratureSpec | None = None,
        patch: PatchSpec | None = None,
    ):
        if not views:
            raise ValueError("need at least one view")
        if labels.labels.shape != moving.shape:
            raise ValueError("label map shape does not match the moving volume")
        self.moving = moving
        self.labels = labels
        self.weight_mode = weight_mode
        self.views = list(views)
        self.quadrature = quadrature if quadrature is not None else default_quadrature(moving)
        self.patch = patch if patch is not None else PatchSpec()
        for v in self.views:
            if v.image.shape != tuple(v.meta.image_size):
                raise ValueError(
                    f"observed image shape {v.image.shape} does not match metadata "
                    f"{tuple(v.meta.image_size)}"
                )
        self.weights: WeightField = build_weights(labels, moving, weight_mode)
        self.num_structures = self.weights.num_structures
        self._centers = _grid_centers(moving.shape, moving.spacing, moving.origin)
        self._lams = self.quadrature.nodes()
        self._rays = []
        for v in self.views:
            grid = pixel_rays(v.camera, v.meta)
            self._rays.append((grid.source, np.ascontiguousarray(grid.targets.reshape(-1, 3))))

    def check_twists(self, twists: np.ndarray) -> np.ndarray:
        t = np.asarray(twists, dtype=np.float64)
        if t.shape != (self.num_structures, 6):
            raise ValueError(
                f"expected twists of shape ({self.num_structures}, 6), got {t.shape}"
            )
        return t


def _warp_values(problem: RegistrationProblem, twists: np.ndarray):
    """Forward warp stage: blended twists, warped coordinates, warped volume."""
    w = problem.weights.weights
    blended = np.einsum("mk,kj->mj", w, twists)
    transforms = batched_exp(blended)
    coords = transform_points(transforms, problem._centers)
    values = trilinear_sample(problem.moving, coords)
    warped = Volume(
        data=values.reshape(problem.moving.shape, order="F"),
        spacing=problem.moving.spacing,
        origin=problem.moving.origin,
    )
    return blended, coords, warped


def _render_view(problem: RegistrationProblem, warped: Volume, view_index: int) -> np.ndarray:
    source, targets = problem._rays[view_index]
    out = np.empty(targets.shape[0])
    _kernels.render_pixels(
        warped.data, warped.origin, warped.spacing, source, targets, problem._lams, out
    )
    h, w = problem.views[view_index].meta.image_size
    return out.reshape(h, w)


def objective(problem: RegistrationProblem, twists: np.ndarray) -> float:
    """Mean gmNCC between the observed views and renders of the warped volume."""
    t = problem.check_twists(twists)
    _, _, warped = _warp_values(problem, t)
    scores = [
        gmncc(problem.views[n].image, _render_view(problem, warped, n), problem.patch)
        for n in range(len(problem.views))
    ]
    return float(np.mean(scores))


def _objective_and_grad_adjoint(problem: RegistrationProblem, twists: np.ndarray):
    blended, coords, warped = _warp_values(problem, twists)
    n_views = len(problem.views)
    g_vol = np.zeros(problem.moving.shape)
    total = 0.0
    for n in range(n_views):
        rendered = _render_view(problem, warped, n)
        score, g_img = _gmncc_with_grad(problem.views[n].image, rendered, problem.patch)
        total += score
        source, targets = problem._rays[n]
        _kernels.render_scatter_adjoint(
            np.ascontiguousarray(g_img.ravel()) / n_views,
            warped.origin,
            warped.spacing,
            source,
            targets,
            problem._lams,
            g_vol,
        )
    loss = total / n_views

    # d loss / d warped coordinate, per voxel.
    g_values = g_vol.ravel(order="F")
    g_coords = g_values[:, None] * trilinear_gradient(problem.moving, coords)

    # d loss / d blended twist. Translation columns of the exponential's
    # Jacobian are the closed-form mixer Omega(omega); rotation columns come
    # from central differences of the (smooth) exponential map.
    m = blended.shape[0]
    g_blended = np.empty((m, 6))
    omega = blended[:, :3]
    theta2 = np.einsum("mi,mi->m", omega, omega)
    _, b, c, _ = _rotation_coeffs(theta2)
    mixer = _omega_matrices(omega, b, c)
    g_blended[:, 3:] = np.einsum("ma,maj->mj", g_coords, mixer)
    centers = problem._centers
    plus = np.empty_like(coords)
    minus = np.empty_like(coords)
    h = EXP_JACOBIAN_STEP
    for j in range(3):
        shifted = blended.copy()
        shifted[:, j] += h
        _kernels.exp_apply(shifted, centers, plus)
        shifted[:, j] -= 2 * h
        _kernels.exp_apply(shifted, centers, minus)
        g_blended[:, j] = np.einsum("ma,ma->m", g_coords, (plus - minus) / (2 * h))

    grad = np.einsum("mk,mj->kj", problem.weights.weights, g_blended)
    return loss, grad


def _omega_matrices(omega: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Translation mixer Omega = I + B [w]x + C [w]x^2 for each twist row."""
    wx, wy, wz = omega[:, 0], omega[:, 1], omega[:, 2]
    out = np.empty((omega.shape[0], 3, 3))
    out[:, 0, 0] = 1.0 - c * (wy * wy + wz * wz)
    out[:, 0, 1] = c * wx * wy - b * wz
    out[:, 0, 2] = c * wx * wz + b * wy
    out[:, 1, 0] = c * wx * wy + b * wz
    out[:, 1, 1] = 1.0 - c * (wx * wx + wz * wz)
    out[:, 1, 2] = c * wy * wz - b * wx
    out[:, 2, 0] = c * wx * wz - b * wy
    out[:, 2, 1] = c * wy * wz + b * wx
    out[:, 2, 2] = 1.0 - c * (wx * wx + wy * wy)
    return out


def _fd_gradient(problem: RegistrationProblem, twists: np.ndarray) -> np.ndarray:
    t = problem.check_twists(twists)
    grad = np.zeros_like(t)
    for k in range(t.shape[0]):
        for j in range(6):
            h = FD_STEP_ROT if j < 3 else FD_STEP_XYZ
            plus = t.copy()
            plus[k, j] += h
            minus = t.copy()
            minus[k, j] -= h
            grad[k, j] = (objective(problem, plus) - objective(problem, minus)) / (2 * h)
    return grad


def gradient(problem: RegistrationProblem, twists: np.ndarray, mode: str = "fd") -> np.ndarray:
    """Gradient of :func:`objective` with respect to the (K, 6) twists.

    ``fd`` (the default) is the contracted central-difference form at steps
    (1e-4 rad, 1e-2 mm). ``adjoint`` is the exact reverse pass, which the
    optimizer uses; it converges to ``fd`` as the steps shrink but can differ
    from the contracted steps by the finite-difference truncation noise of
    the piecewise-trilinear objective.
    """
    t = problem.check_twists(twists)
    if mode == "adjoint":
        return _objective_and_grad_adjoint(problem, t)[1]
    if mode == "fd":
        return _fd_gradient(problem, t)
    raise ValueError(f"unknown gradient mode {mode!r}")


def _adam_ascent(loss_and_grad, v0: np.ndarray, config: OptimConfig, what: str):
    """Maximize with Adam; returns (best iterate, loss history, converged)."""
    v = v0.copy()
    lr = config.step_vector()
    m1 = np.zeros_like(v)
    m2 = np.zeros_like(v)
    history: list[float] = []
    best_trace: list[float] = []
    best_loss = -np.inf
    best_v = v.copy()
    converged = False
    for t in range(1, config.max_iters + 1):
        loss, grad = loss_and_grad(v)
        if not np.isfinite(loss):
            raise NumericalFailureError(
                f"{what} produced a non-finite loss at iteration {t}", history
            )
        history.append(float(loss))
        if loss > best_loss:
            best_loss = float(loss)
            best_v = v.copy()
        best_trace.append(best_loss)
        if (
            len(best_trace) > config.convergence_window
            and best_trace[-1] - best_trace[-1 - config.convergence_window]
            < config.convergence_tol
        ):
            converged = True
            break
        m1 = config.adam_beta1 * m1 + (1 - config.adam_beta1) * grad
        m2 = config.adam_beta2 * m2 + (1 - config.adam_beta2) * grad * grad
        m1_hat = m1 / (1 - config.adam_beta1**t)
        m2_hat = m2 / (1 - config.adam_beta2**t)
        v = v + lr * m1_hat / (np.sqrt(m2_hat) + config.adam_eps)
    return best_v, history, converged


def optimize_poses(
    problem: RegistrationProblem,
    config: OptimConfig | None = None,
    init: np.ndarray | None = None,
) -> PoseEstimate:
    """Adam ascent on the K structure twists; returns the best-loss iterate."""
    config = config if config is not None else OptimConfig()
    if init is None:
        init = np.zeros((problem.num_structures, 6))
    init = problem.check_twists(init)

    if config.gradient_mode == "adjoint":

        def loss_and_grad(v):
            return _objective_and_grad_adjoint(problem, v)

    else:

        def loss_and_grad(v):
            return objective(problem, v), _fd_gradient(problem, v)

    best_v, history, converged = _adam_ascent(loss_and_grad, init, config, "pose optimization")
    return PoseEstimate(twists=best_v, loss_history=history, converged=converged)


def register_camera(
    moving: Volume,
    labels: LabelMap,
    anchor_id: int,
    observed: np.ndarray,
    meta: IntrinsicMeta,
    init_pose: CameraPose,
    config: OptimConfig | None = None,
    quadrature: QuadratureSpec | None = None,
    patch: PatchSpec | None = None,
) -> CameraPose:
    """Refine a camera pose by rigidly registering the anchor structure.

    Optimizes a single twist applied as a right-perturbation of
    ``init_pose``, maximizing gmNCC between the masked render of the anchor
    and the (full) observed image. Rendering with the perturbed camera
    equals rendering the counter-rotated volume along the initial rays, so
    the ray grid is fixed and the perturbation moves the sample points.

    Raises NumericalFailureError if the loss only ever decreases.
    """
    config = config if config is not None else OptimConfig()
    quadrature = quadrature if quadrature is not None else default_quadrature(moving)
    patch = patch if patch is not None else PatchSpec()
    if anchor_id not in labels.structure_ids():
        raise UnknownStructureError(f"anchor structure {anchor_id} not present in the label map")
    anchor_vol = masked_volume(moving, labels, [anchor_id])

    camera0 = CameraMatrix.compose(meta, init_pose)
    rays = pixel_rays(camera0, meta)
    h, w = meta.image_size
    targets = np.ascontiguousarray(rays.targets.reshape(-1, 3))
    source = rays.source
    lams = quadrature.nodes()
    obs = np.asarray(observed, dtype=np.float64)
    if obs.shape != (h, w):
        raise ValueError(f"observed image shape {obs.shape} does not match metadata {(h, w)}")

    def loss_and_grad(delta):
        t_inv = np.ascontiguousarray(se3_exp(-delta)[:3, :])
        flat = np.empty(targets.shape[0])
        _kernels.render_pixels_affine(
            anchor_vol.data, anchor_vol.origin, anchor_vol.spacing,
            source, targets, lams, t_inv, flat,
        )
        score, g_img = _gmncc_with_grad(obs, flat.reshape(h, w), patch)
        partials = np.empty((targets.shape[0], 12))
        _kernels.camera_backward_partials(
            anchor_vol.data, anchor_vol.origin, anchor_vol.spacing,
            source, targets, lams, t_inv, np.ascontiguousarray(g_img.ravel()), partials,
        )
        contraction = partials.sum(axis=0).reshape(3, 4)
        grad = np.empty(6)
        for d in range(6):
            shift = np.zeros(6)
            shift[d] = EXP_JACOBIAN_STEP
            t_plus = se3_exp(-(delta + shift))
            t_minus = se3_exp(-(delta - shift))
            d_t = (t_plus - t_minus)[:3, :] / (2 * EXP_JACOBIAN_STEP)
            grad[d] = np.sum(d_t * contraction)
        return score, grad

    best_delta, history, _ = _adam_ascent(
        loss_and_grad, np.zeros(6), config, "camera registration"
    )
    if int(np.argmax(history)) == 0 and history[-1] < history[0] - config.convergence_tol:
        raise NumericalFailureError(
            "camera registration diverged (loss decreased for the whole run)", history
        )
    refined = init_pose.matrix4() @ se3_exp(best_delta)
    return CameraPose(rotation=refined[:3, :3], translation=refined[:3, 3])
