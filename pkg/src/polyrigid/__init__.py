"""Polyrigid deformable 2D/3D registration.

Aligns a 3D attenuation volume to a sparse set of 2D X-ray projections by
optimizing one rigid transform per articulated structure and fusing them in
the tangent space of SE(3) into a smooth, fold-free deformation field.
"""

from .errors import (
    ConstantImageWarning,
    EmptyStructureError,
    FileFormatError,
    InvalidMetadataError,
    InvalidTransformError,
    NearPiRotationError,
    NumericalFailureError,
    PolyrigidError,
    SingularCameraError,
    UnknownStructureError,
)
from .geometry import (
    CameraMatrix,
    CameraPose,
    IntrinsicMeta,
    Ray,
    RayGrid,
    build_intrinsics,
    detector_point,
    pixel_rays,
    project_point,
    source_position,
)
from .grid import (
    DistanceField,
    LabelMap,
    Volume,
    distance_transform,
    structure_masses,
    trilinear_sample,
    voxel_to_world,
    world_to_voxel,
)
from .liealg import batched_exp, se3_exp, se3_log, skew, transform_points
from .render import (
    QuadratureSpec,
    default_quadrature,
    render_drr,
    render_masked,
    render_ray,
)
from .registration import (
    OptimConfig,
    PoseEstimate,
    RegistrationProblem,
    View,
    gradient,
    objective,
    optimize_poses,
    register_camera,
)
from .similarity import (
    PatchSpec,
    dice,
    gmncc,
    gradient_ncc,
    hd95,
    local_ncc,
    multiscale_ncc,
    ncc,
    sobel_magnitude,
)
from .warpfield import (
    PolyrigidField,
    WeightField,
    WeightMode,
    apply_to_grid,
    build_weights,
    fuse_at,
    jacobian_stats,
    jacobian_stats_coords,
    warp_labels,
    warp_volume,
    weights_at,
)

__version__ = "0.1.0"
