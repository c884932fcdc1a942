"""Batch command line: phantom generation, rendering, registration, warping,
and evaluation.

Exit codes: 0 on success, 1 on usage or data errors, 2 on numerical failure.
``--threads`` caps the parallelism of the sampling kernels; single-threaded
runs are bit-reproducible.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import fileio, phantom
from .errors import NumericalFailureError, PolyrigidError
from .geometry import CameraMatrix
from .grid import LabelMap, Volume
from .registration import (
    OptimConfig,
    RegistrationProblem,
    View,
    optimize_poses,
    register_camera,
)
from .render import QuadratureSpec, default_quadrature, render_drr, to_pgm16
from .similarity import dice, hd95
from .warpfield import (
    PolyrigidField,
    WeightMode,
    apply_to_grid,
    build_weights,
    jacobian_stats_coords,
    warp_labels,
    warp_volume,
)


def _quadrature(vol: Volume, mq) -> QuadratureSpec:
    return QuadratureSpec(sample_count=mq) if mq else default_quadrature(vol)


def _weight_mode(args) -> WeightMode:
    return WeightMode(variant=args.mode, epsilon=args.epsilon)


def cmd_phantom(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = phantom.PRESETS[args.preset](args.grid)
    if args.twists:
        twists = fileio.read_twists(args.twists)
    else:
        twists = phantom.random_twists(
            len(spec.structures), args.max_angle, args.max_translation, args.seed
        )
    vol, _ = phantom.make_phantom(spec)
    case = phantom.make_case(
        spec,
        twists,
        view_count=args.views,
        arc_degrees=args.arc,
        quadrature=_quadrature(vol, args.mq),
    )
    fileio.write_volume(out / "volume.pvol", case.moving)
    fileio.write_labels(out / "labels.plab", case.labels, case.moving.spacing, case.moving.origin)
    fileio.write_labels(
        out / "true_warped_labels.plab",
        case.true_warped_labels,
        case.moving.spacing,
        case.moving.origin,
    )
    fileio.write_twists(out / "true_twists.txt", case.true_twists)
    manifest = ["volume = volume.pvol", "labels = labels.plab", "weight_mode = mass"]
    for n, view in enumerate(case.views):
        fileio.write_image(out / f"view_{n:02d}.pimg", view.image)
        fileio.write_camera_config(out / f"camera_{n:02d}.cam", view.meta, view.camera.pose)
        manifest.append(f"view = view_{n:02d}.pimg camera_{n:02d}.cam")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="ascii")
    print(f"wrote phantom case with {len(case.views)} views to {out}")
    return 0


def cmd_render(args) -> int:
    vol = fileio.read_volume(args.volume)
    meta, pose = fileio.read_camera_config(args.camera)
    camera = CameraMatrix.compose(meta, pose)
    image = render_drr(vol, camera, meta, _quadrature(vol, args.mq))
    fileio.write_image(args.out, image)
    if args.pgm:
        Path(args.pgm).write_bytes(to_pgm16(image))
    print(f"rendered {image.shape[0]}x{image.shape[1]} image to {args.out}")
    return 0


def _load_problem(manifest: fileio.Manifest):
    vol = fileio.read_volume(manifest.volume)
    labels, _, _ = fileio.read_labels(manifest.labels)
    views = []
    for image_path, camera_path in manifest.views:
        image = fileio.read_image(image_path)
        meta, pose = fileio.read_camera_config(camera_path)
        views.append(View(image=image, camera=CameraMatrix.compose(meta, pose), meta=meta))
    quadrature = (
        QuadratureSpec(sample_count=manifest.quadrature) if manifest.quadrature else None
    )
    problem = RegistrationProblem(
        moving=vol,
        labels=labels,
        weight_mode=manifest.weight_mode,
        views=views,
        quadrature=quadrature,
        patch=manifest.patch,
    )
    config = OptimConfig(**manifest.optim_overrides)
    return problem, config


def cmd_register(args) -> int:
    manifest = fileio.read_manifest(args.manifest)
    problem, config = _load_problem(manifest)
    estimate = optimize_poses(problem, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_twists(out / "twists.txt", estimate.twists)
    for k, matrix in enumerate(estimate.transforms()):
        fileio.write_matrix(out / f"transform_{k:02d}.txt", matrix)
    fileio.write_loss_history(out / "loss_history.csv", estimate.loss_history)
    print(
        f"final loss {estimate.loss_history[-1]!r} after {len(estimate.loss_history)} "
        f"iterations (converged={estimate.converged})"
    )
    return 0


def cmd_register_camera(args) -> int:
    vol = fileio.read_volume(args.volume)
    labels, _, _ = fileio.read_labels(args.labels)
    observed = fileio.read_image(args.image)
    meta, init_pose = fileio.read_camera_config(args.camera)
    config = OptimConfig(max_iters=args.max_iters)
    try:
        refined = register_camera(
            vol,
            labels,
            args.anchor,
            observed,
            meta,
            init_pose,
            config=config,
            quadrature=_quadrature(vol, args.mq),
        )
    except NumericalFailureError as e:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        fileio.write_loss_history(out / "loss_history.csv", e.history)
        raise
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_camera_config(out / "camera_refined.cam", meta, refined)
    print(f"wrote refined camera to {out / 'camera_refined.cam'}")
    return 0


def cmd_warp(args) -> int:
    vol = fileio.read_volume(args.volume)
    labels, _, _ = fileio.read_labels(args.labels)
    twists = fileio.read_twists(args.twists)
    weights = build_weights(labels, vol, _weight_mode(args))
    field = PolyrigidField(twists=twists, weights=weights)
    warped = warp_volume(vol, field)
    fileio.write_volume(args.out_volume, warped)
    if args.out_labels:
        moved = warp_labels(labels, vol, field)
        fileio.write_labels(args.out_labels, moved, vol.spacing, vol.origin)
    if args.out_coords:
        fileio.write_warp(args.out_coords, apply_to_grid(field), vol.shape)
    print(f"warped volume written to {args.out_volume}")
    return 0


def cmd_eval(args) -> int:
    pred, spacing, _ = fileio.read_labels(args.pred_labels)
    true, _, _ = fileio.read_labels(args.true_labels)
    if pred.labels.shape != true.labels.shape:
        raise PolyrigidError("label maps have different shapes")
    ids = sorted(set(pred.structure_ids()) | set(true.structure_ids()))
    for sid in ids:
        a = pred.mask(sid)
        b = true.mask(sid)
        d = dice(a, b)
        if a.any() and b.any():
            h = repr(hd95(a, b, spacing))
        else:
            h = "nan"
        sys.stdout.write(f"{sid}\t{d!r}\t{h}\n")
    if args.warp:
        coords, shape = fileio.read_warp(args.warp)
        folds, sigma = jacobian_stats_coords(coords, shape, spacing)
        sys.stdout.write(f"folds\t{folds!r}\n")
        sys.stdout.write(f"sigma_log_jac\t{sigma!r}\n")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="polyrigid", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, help="cap kernel parallelism")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a ground-truth phantom case")
    p.add_argument("--preset", choices=sorted(phantom.PRESETS), required=True)
    p.add_argument("--views", type=int, default=2)
    p.add_argument("--arc", type=float, default=30.0)
    p.add_argument("--twists", default=None, help="twist file; random twists if omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--mq", type=int, default=None)
    p.add_argument("--max-angle", type=float, default=0.1, dest="max_angle")
    p.add_argument("--max-translation", type=float, default=10.0, dest="max_translation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("render", help="render a DRR from a volume and camera config")
    p.add_argument("--volume", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mq", type=int, default=None)
    p.add_argument("--pgm", default=None, help="also write a 16-bit PGM preview")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("register", help="optimize structure poses from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("register-camera", help="refine a camera pose from the anchor structure")
    p.add_argument("--volume", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--anchor", type=int, required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--camera", required=True, help="initial camera config")
    p.add_argument("--out", required=True)
    p.add_argument("--mq", type=int, default=None)
    p.add_argument("--max-iters", type=int, default=100, dest="max_iters")
    p.set_defaults(func=cmd_register_camera)

    p = sub.add_parser("warp", help="apply twists to a volume through the weight field")
    p.add_argument("--volume", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--twists", required=True)
    p.add_argument("--mode", choices=("mass", "reciprocal"), default="mass")
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--out-volume", required=True, dest="out_volume")
    p.add_argument("--out-labels", default=None, dest="out_labels")
    p.add_argument("--out-coords", default=None, dest="out_coords")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("eval", help="report dice/hd95 per structure and topology metrics")
    p.add_argument("--pred-labels", required=True, dest="pred_labels")
    p.add_argument("--true-labels", required=True, dest="true_labels")
    p.add_argument("--warp", default=None, help="PWRP1 field for fold statistics")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    if args.threads is not None:
        import numba

        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        return args.func(args)
    except NumericalFailureError as e:
        sys.stderr.write(f"numerical failure: {e}\n")
        return 2
    except (PolyrigidError, OSError, ValueError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
