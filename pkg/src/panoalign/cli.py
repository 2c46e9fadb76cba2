"""Command-line pipeline: split / merge / align / eval / synth / gradcheck.

Exit codes: 0 success, 1 validation error (bad flags, malformed inputs),
2 runtime or numeric failure.
"""

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import geometry, graphopt, io, metrics, oracle, resample
from .errors import (CorruptHeader, DimensionMismatch, Diverged, EmptyCloud,
                     EmptyOverlap, InvalidDepth, IoFailure, NonFiniteGradient,
                     ParseError, UnsupportedFormat, ValidationError)
from .geometry import FACE_NAMES, CameraModel

_VALIDATION_ERRORS = (ValidationError, ParseError, UnsupportedFormat,
                      CorruptHeader, DimensionMismatch, ValueError,
                      FileNotFoundError, IsADirectoryError)
_RUNTIME_ERRORS = (NonFiniteGradient, Diverged, InvalidDepth, IoFailure,
                   EmptyCloud, EmptyOverlap, FloatingPointError)


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; remap that to 1."""

    def exit(self, status=0, message=None):
        if message:
            sys.stderr.write(message)
        raise SystemExit(0 if status == 0 else 1)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ValidationError(f"size must look like 1024x512, got {text!r}") from None
    if w != 2 * h or h < 1:
        raise ValidationError(f"ERP size must be 2:1, got {w}x{h}")
    return w, h


def _parse_floats(text: str, count: int, what: str) -> tuple:
    try:
        vals = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise ValidationError(f"{what} must be comma-separated numbers") from None
    if len(vals) != count:
        raise ValidationError(f"{what} needs exactly {count} values, got {len(vals)}")
    return vals


def _resolve_threads(args) -> int:
    threads = args.threads
    if threads is None:
        env = os.environ.get("PANOALIGN_THREADS")
        threads = int(env) if env else 1
    if threads < 1:
        raise ValidationError("--threads must be >= 1")
    return threads


def _prepare_out_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise ValidationError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------- split

def _cmd_split(args) -> int:
    erp_path = Path(args.erp)
    out = Path(args.out)
    kind = args.kind
    grid = io.read_depth(erp_path) if kind == "depth" else io.read_intensity(erp_path)
    geometry.check_erp_shape(grid)
    h = grid.shape[0]
    face_size = args.face_size or h // 2
    cam = CameraModel.cube(face_size)
    _prepare_out_dir(out, args.force)

    interp = "nearest" if kind == "depth" else "bilinear"
    faces = resample.erp_to_faces(np.asarray(grid, dtype=float), cam, interp=interp)
    data = faces.faces
    if kind == "depth":
        data = data / resample.face_rho_grid(cam)  # radial -> perspective z

    entries = {}
    for i, name in enumerate(FACE_NAMES):
        fname = f"{name}_depth.pfm" if kind == "depth" else f"{name}.pfm"
        io.write_pfm(out / fname, data[i])
        entries[name] = {"depth" if kind == "depth" else "image": str(out / fname)}
    manifest = io.Manifest(
        erp_height=h, erp_width=grid.shape[1], face_size=face_size, faces=entries,
        metadata={"generator": "panoalign split", "source": str(erp_path),
                  "source_sha256": io.file_digest(erp_path), "kind": kind},
    )
    io.save_manifest(out / "manifest.json", manifest)
    print(f"wrote 6 {kind} faces ({face_size}x{face_size}) and manifest to {out}")
    return 0


# ---------------------------------------------------------------- merge

def _load_faces(manifest: io.Manifest, cam: CameraModel):
    """Stack the manifest's per-face depth (as z-depth) into CubemapFaces."""
    manifest.require_depth()
    rho = resample.face_rho_grid(cam)
    stack = []
    for name in FACE_NAMES:
        grid = io.read_depth(manifest.faces[name]["depth"]).astype(float)
        if grid.shape != (cam.face_size, cam.face_size):
            raise DimensionMismatch(
                f"face {name!r} is {grid.shape}, manifest says {cam.face_size}"
            )
        if manifest.depth_encoding == "radial":
            grid = grid / rho
        stack.append(grid)
    return resample.CubemapFaces(faces=np.stack(stack), cam=cam)


def _load_face_normals(manifest: io.Manifest, cam: CameraModel):
    stack = []
    for name in FACE_NAMES:
        grid, _ = io.read_normals(manifest.faces[name]["normals"])
        if grid.shape != (cam.face_size, cam.face_size, 3):
            raise DimensionMismatch(f"face {name!r} normals have shape {grid.shape}")
        stack.append(grid)
    return resample.CubemapFaces(faces=np.stack(stack), cam=cam)


def _merge_from_manifest(manifest: io.Manifest, want_normals: bool):
    cam = CameraModel.cube(manifest.face_size)
    faces = _load_faces(manifest, cam)
    shape = (manifest.erp_height, manifest.erp_width)
    depth, face_id, valid = resample.merge_depth_to_erp(faces, cam, shape)
    normals = None
    if want_normals:
        if not manifest.has_normals():
            raise ValidationError("manifest lists no per-face normal files")
        nf = _load_face_normals(manifest, cam)
        normals = resample.merge_normals_to_erp(
            nf, cam, face_id,
            flip=(manifest.normal_orientation == "outward"),
            frame=manifest.normal_frame,
        )
    return cam, depth, face_id, valid, normals


def _cmd_merge(args) -> int:
    manifest = io.load_manifest(args.manifest)
    cam, depth, face_id, valid, normals = _merge_from_manifest(
        manifest, want_normals=args.normals_out is not None
    )
    out = Path(args.out)
    io.write_pfm(out, depth.astype(np.float32))
    io.write_pfm(Path(str(out) + ".faceid.pfm"), face_id.astype(np.float32))
    if not valid.all():
        io.write_pfm(Path(str(out) + ".valid.pfm"), valid.astype(np.float32))
    if normals is not None:
        io.write_normals(args.normals_out, normals.astype(np.float32))
    io.write_report(Path(str(out) + ".meta.json"), {
        "tool": "panoalign merge",
        "manifest": str(args.manifest),
        "manifest_sha256": manifest.digest,
        "valid_pixels": int(valid.sum()),
        "invalid_pixels": int((~valid).sum()),
    })
    print(f"merged {manifest.erp_width}x{manifest.erp_height} depth -> {out}")
    return 0


# ---------------------------------------------------------------- align

def _cmd_align(args) -> int:
    t0 = time.perf_counter()
    manifest = io.load_manifest(args.manifest)
    cfg = io.load_config(args.config) if args.config else graphopt.OptConfig()
    threads = _resolve_threads(args)

    cam, depth_in, face_id, valid, normals_in = _merge_from_manifest(
        manifest, want_normals=manifest.has_normals()
    )
    derived_normals = normals_in is None
    if derived_normals:
        normals_in, _ = geometry.normals_from_depth(depth_in)
    if manifest.intensity:
        intensity = io.read_intensity(manifest.intensity)
        if intensity.shape != depth_in.shape:
            raise DimensionMismatch("intensity ERP size does not match the manifest")
    else:
        intensity = np.full(depth_in.shape, 0.5)

    result = graphopt.optimize(
        depth_in, normals_in, intensity, face_id, cfg,
        valid=None if valid.all() else valid,
    )

    out = Path(args.out)
    io.write_pfm(out, result.depth.astype(np.float32))
    if args.normals_out:
        io.write_normals(args.normals_out, result.normals.astype(np.float32))
    if args.ply:
        gray = np.clip(intensity * 255.0, 0, 255).astype(np.uint8)
        colors = np.repeat(gray[..., None], 3, axis=-1)
        cloud = geometry.lift_points(result.depth, valid, colors=colors)
        io.write_pointcloud(args.ply, cloud,
                            comment=f"panoalign align manifest sha256 {manifest.digest}")

    report = {
        "tool": "panoalign align",
        "manifest": str(args.manifest),
        "manifest_sha256": manifest.digest,
        "config": io.config_to_dict(cfg),
        "threads": threads,
        "normals_source": "derived_from_depth" if derived_normals else "manifest",
        "lambda_c": [float(v) for v in result.lambda_c],
        "levels": [s.to_dict() for s in result.levels],
        "total_seconds": time.perf_counter() - t0,
    }
    if args.report:
        io.write_report(args.report, report)
    lam = ", ".join(f"{v:.4f}" for v in result.lambda_c)
    print(f"aligned depth -> {out}")
    print(f"lambda_c = [{lam}]")
    for s in result.levels:
        print(f"level {s.level}: {s.width}x{s.height} lr={s.lr:g} iters={s.iterations} "
              f"loss {s.loss_initial:.4g} -> {s.loss_final:.4g} ({s.seconds:.2f}s)")
    return 0


# ---------------------------------------------------------------- eval

_TABLE_ORDER = ("abs_rel", "rmse", "delta1", "delta2", "delta3",
                "chamfer", "fscore", "iou", "aligned_scale", "valid_pixel_count")


def _cmd_eval(args) -> int:
    pred = io.read_depth(args.pred)
    gt = io.read_depth(args.gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"pred is {pred.shape}, gt is {gt.shape}")
    cfg = metrics.EvalConfig(
        fscore_tau=args.tau, voxel_size=args.voxel,
        max_points=args.max_points, seed=args.seed,
    )
    report = metrics.evaluate(pred.astype(float), gt.astype(float),
                              cfg=cfg, which=args.metrics)
    doc = report.to_dict()
    width = max(len(k) for k in _TABLE_ORDER)
    for key in _TABLE_ORDER:
        val = doc[key]
        text = f"{val:.6g}" if isinstance(val, float) else str(val)
        print(f"{key:<{width}}  {text}")
    if args.report:
        io.write_report(args.report, doc)
    return 0


# ---------------------------------------------------------------- synth

def _cmd_synth(args) -> int:
    width, height = _parse_size(args.size)
    scales = _parse_floats(args.scales, 6, "--scales")
    camera = _parse_floats(args.camera, 3, "--camera")
    if args.scene == "box":
        size = _parse_floats(args.extent, 3, "--extent")
    else:
        size = (args.radius,)
    spec = oracle.SceneSpec(kind=args.scene, size=size, camera=camera,
                            height=height, width=width)
    corruption = oracle.Corruption(scales=scales,
                                   normal_noise_deg=args.normal_noise,
                                   depth_noise=args.depth_noise)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)

    scene = oracle.render_scene(spec)
    face_size = args.face_size or height // 2
    cam = CameraModel.cube(face_size)
    depth_faces, normal_faces = oracle.corrupt(scene, cam, corruption, seed=args.seed)

    io.write_pfm(out / "gt_depth.pfm", scene.depth.astype(np.float32))
    io.write_pfm(out / "intensity.pfm", scene.intensity.astype(np.float32))
    entries = {}
    for i, name in enumerate(FACE_NAMES):
        dpath = out / f"{name}_depth.pfm"
        npath = out / f"{name}_normals.pfm"
        io.write_pfm(dpath, depth_faces.faces[i].astype(np.float32))
        io.write_normals(npath, normal_faces.faces[i].astype(np.float32))
        entries[name] = {"depth": str(dpath), "normals": str(npath)}
    manifest = io.Manifest(
        erp_height=height, erp_width=width, face_size=face_size, faces=entries,
        intensity=str(out / "intensity.pfm"), gt_depth=str(out / "gt_depth.pfm"),
        metadata={
            "generator": "panoalign synth", "prng": oracle.PRNG_NAME,
            "seed": args.seed, "scene": args.scene, "size": list(size),
            "camera": list(camera), "scales": list(scales),
            "normal_noise_deg": args.normal_noise, "depth_noise": args.depth_noise,
        },
    )
    io.save_manifest(out / "manifest.json", manifest)
    print(f"synthesized {args.scene} scene ({width}x{height}, faces {face_size}) in {out}")
    return 0


# ---------------------------------------------------------------- gradcheck

def _cmd_gradcheck(args) -> int:
    width, height = _parse_size(args.size)
    if height > 16 or width > 32:
        raise ValidationError(f"gradcheck size is capped at 32x16, got {width}x{height}")
    if args.instances < 1:
        raise ValidationError("--instances must be >= 1")
    worst = 0.0
    for i in range(args.instances):
        inst = oracle.make_random_instance(height=height, width=width,
                                           seed=args.seed + i)
        worst = max(worst, oracle.finite_diff_gradcheck(inst))
    print(f"max relative gradient error over {args.instances} instance(s): {worst:.3e}")
    if worst >= 1e-4:
        print("FAIL: exceeds 1e-4", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------- driver

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="panoalign",
                     description="Scale-consistent 360-degree depth pipeline")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker threads (default: PANOALIGN_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="project an ERP image/depth onto six cube faces")
    p.add_argument("--erp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--face-size", type=int, default=None)
    p.add_argument("--kind", choices=("image", "depth"), default="image")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("merge", help="merge per-face depth into ERP (rho-corrected)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normals-out", default=None)
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("align", help="merge then run the graph refinement")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--normals-out", default=None)
    p.add_argument("--ply", default=None)
    p.add_argument("--report", default=None)
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("eval", help="2D/3D metrics against a ground-truth ERP depth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metrics", default="2d,3d")
    p.add_argument("--tau", type=float, default=metrics.EvalConfig.fscore_tau)
    p.add_argument("--voxel", type=float, default=metrics.EvalConfig.voxel_size)
    p.add_argument("--max-points", type=int, default=metrics.EvalConfig.max_points)
    p.add_argument("--seed", type=int, default=metrics.EvalConfig.seed)
    p.add_argument("--report", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synth", help="synthesize an oracle scene + corrupted manifest")
    p.add_argument("--scene", choices=("box", "sphere"), default="box")
    p.add_argument("--size", default="256x128")
    p.add_argument("--scales", default="1,1,1,1,1,1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--face-size", type=int, default=None)
    p.add_argument("--extent", default="3,2,4", help="box half-extents, meters")
    p.add_argument("--radius", type=float, default=3.0)
    p.add_argument("--camera", default="0.25,-0.2,0.4")
    p.add_argument("--normal-noise", type=float, default=0.0, help="degrees (std)")
    p.add_argument("--depth-noise", type=float, default=0.0, help="relative std")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of the gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="16x8")
    p.add_argument("--instances", type=int, default=1)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except _VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except _RUNTIME_ERRORS as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
