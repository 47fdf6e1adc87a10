"""Command-line pipeline: mvs -> train -> extract -> denoise -> eval.

Stage boundaries are files on disk (PLY/OBJ/PFM/CSV); every stage writes
a manifest entry with config snapshot, wall time, and sha256 digests of
its inputs and outputs, so tampering and stale artifacts are detectable.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, io, lof, mesh_extract, metrics, mvs, trainer
from .core import ConfigError, GgsError
from .trainer import TrainConfig, parse_config_file

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class PipelineManifest:
    """Per-stage provenance: paths, digests, config snapshot, wall time."""

    def __init__(self, path):
        self.path = path
        self.data = {"tool": "ggs", "version": __version__, "stages": {}}

    def record_stage(self, name: str, inputs: dict, outputs: dict,
                     config: dict, wall_time_s: float, extra: dict | None = None):
        stage = {
            "inputs": {str(p): file_digest(p) for p in inputs.values()},
            "outputs": {str(p): file_digest(p) for p in outputs.values()},
            "config": config,
            "wall_time_s": wall_time_s,
        }
        if extra:
            stage.update(extra)
        self.data["stages"][name] = stage
        self.save()

    def save(self):
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PipelineManifest":
        m = cls(path)
        with open(path) as fh:
            m.data = json.load(fh)
        return m

    def verify(self) -> list[str]:
        """Recompute digests; returns a list of mismatch descriptions."""
        problems = []
        for stage, info in self.data["stages"].items():
            for path, digest in {**info["inputs"], **info["outputs"]}.items():
                if not os.path.exists(path):
                    problems.append(f"{stage}: missing {path}")
                elif file_digest(path) != digest:
                    problems.append(f"{stage}: digest mismatch for {path}")
        return problems


# ---------------------------------------------------------------------------
# Shared input handling
# ---------------------------------------------------------------------------

def _require(path, what: str):
    if path is None:
        raise ConfigError(f"missing required {what}")
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _load_views(images_dir, cameras_path) -> list[mvs.View]:
    cams = io.read_cameras_txt(_require(cameras_path, "camera file"))
    _require(images_dir, "image directory")
    views = []
    for vid in sorted(cams):
        candidates = [os.path.join(images_dir, f"{vid:04d}.png"),
                      os.path.join(images_dir, f"{vid}.png")]
        img_path = next((p for p in candidates if os.path.exists(p)), None)
        if img_path is None:
            raise ConfigError(f"no image for view {vid} under {images_dir}")
        views.append(mvs.View(vid, cams[vid], io.read_png(img_path)))
    return views


def _resolve_threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("GGS_THREADS")
    return max(1, int(env)) if env else 1


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        cfg = parse_config_file(_require(args.config, "config file"), base=cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    for flag, field in (("iterations", "iterations"), ("alpha", "alpha"),
                        ("beta", "beta"), ("snap_interval", "snap_interval"),
                        ("subsample", "subsample"), ("init_jitter", "init_jitter")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, field, val)

    only = [name for name in ("move", "flatten", "rotate")
            if getattr(args, f"only_{name}", False)]
    if len(only) > 1:
        raise ConfigError(f"conflicting toggles: --only-{only[0]} and --only-{only[1]}")
    for name in ("move", "flatten", "rotate"):
        if getattr(args, f"no_{name}", False) and getattr(args, f"only_{name}", False):
            raise ConfigError(f"conflicting toggles: --no-{name} and --only-{name}")
    if only:
        cfg.enable_move = only[0] == "move"
        cfg.enable_flatten = only[0] == "flatten"
        cfg.enable_rotate = only[0] == "rotate"
    else:
        if args.no_move:
            cfg.enable_move = False
        if args.no_flatten:
            cfg.enable_flatten = False
        if args.no_rotate:
            cfg.enable_rotate = False
    return TrainConfig(**{f.name: getattr(cfg, f.name)
                          for f in dataclasses.fields(TrainConfig)})


# ---------------------------------------------------------------------------
# Stage implementations (used by both subcommands and the full pipeline)
# ---------------------------------------------------------------------------

def run_mvs(args, manifest: PipelineManifest, out_cloud) -> str:
    views = _load_views(args.images, args.cameras)
    config = mvs.MvsConfig(
        downsample=args.downsample, num_planes=args.planes,
        depth_min=args.depth_min, depth_max=args.depth_max,
        ncc_window=args.window, num_neighbors=args.neighbors,
        min_consistent=args.min_consistent, pixel_tolerance=args.pixel_tol,
        depth_tolerance=args.depth_tol,
        consistency_iterations=args.consistency_iterations)
    t0 = time.perf_counter()
    cloud, timings = mvs.reconstruct(views, config, threads=_resolve_threads(args))
    io.write_point_cloud_ply(cloud, out_cloud)
    manifest.record_stage(
        "mvs", {"cameras": args.cameras}, {"cloud": out_cloud},
        {k: getattr(config, k) for k in ("downsample", "num_planes", "depth_min",
                                         "depth_max", "ncc_window", "num_neighbors",
                                         "min_consistent", "pixel_tolerance",
                                         "depth_tolerance", "consistency_iterations")},
        time.perf_counter() - t0,
        extra={"points": len(cloud), "timings": timings})
    return out_cloud


def run_train(args, manifest: PipelineManifest, cloud_path, out_checkpoint,
              out_loss) -> str:
    cfg = _train_config(args)
    views = _load_views(args.images, args.cameras)
    dense = None
    if cfg.enable_move or cfg.enable_rotate or cloud_path:
        dense = io.read_point_cloud_ply(_require(cloud_path, "guidance cloud"))
    t0 = time.perf_counter()
    final, history = trainer.run(
        cfg, [(v.camera, v.image) for v in views], dense_cloud=dense,
        progress_every=max(cfg.iterations // 10, 1))
    io.write_gaussian_ply(final, out_checkpoint)
    trainer.write_loss_csv(history, out_loss)
    inputs = {"cameras": args.cameras}
    if cloud_path:
        inputs["cloud"] = cloud_path
    manifest.record_stage(
        "train", inputs, {"checkpoint": out_checkpoint, "loss": out_loss},
        {f.name: getattr(cfg, f.name) for f in dataclasses.fields(TrainConfig)},
        time.perf_counter() - t0, extra={"gaussians": len(final)})
    return out_checkpoint


def run_extract(args, manifest: PipelineManifest, checkpoint_path,
                out_obj, out_ply) -> str:
    gaussians = io.read_gaussian_ply(_require(checkpoint_path, "checkpoint"))
    cams = io.read_cameras_txt(_require(args.cameras, "camera file"))
    t0 = time.perf_counter()
    mesh = mesh_extract.extract(
        gaussians, [cams[v] for v in sorted(cams)],
        voxel_size=args.voxel_size, alpha_threshold=args.alpha_threshold)
    io.write_mesh_obj(mesh, out_obj)
    io.write_mesh_ply(mesh, out_ply)
    manifest.record_stage(
        "extract", {"checkpoint": checkpoint_path, "cameras": args.cameras},
        {"mesh_obj": out_obj, "mesh_ply": out_ply},
        {"voxel_size": args.voxel_size, "alpha_threshold": args.alpha_threshold},
        time.perf_counter() - t0,
        extra={"vertices": mesh.n_vertices, "faces": mesh.n_faces})
    return out_ply


def run_denoise(args, manifest: PipelineManifest, mesh_path, cloud_path,
                out_obj, out_ply) -> str:
    if args.lof_threshold <= 1.0:
        raise ConfigError("--lof-threshold must be > 1")
    mesh = io.read_mesh(_require(mesh_path, "input mesh"))
    dense = io.read_point_cloud_ply(_require(cloud_path, "reference cloud"))
    t0 = time.perf_counter()
    model = lof.fit(dense, k=args.k)
    cleaned = lof.denoise_mesh(mesh, model, threshold=args.lof_threshold,
                               min_component_frac=args.min_component_frac)
    io.write_mesh_obj(cleaned, out_obj)
    io.write_mesh_ply(cleaned, out_ply)
    manifest.record_stage(
        "denoise", {"mesh": mesh_path, "cloud": cloud_path},
        {"mesh_obj": out_obj, "mesh_ply": out_ply},
        {"k": args.k, "lof_threshold": args.lof_threshold,
         "min_component_frac": args.min_component_frac},
        time.perf_counter() - t0,
        extra={"faces_in": mesh.n_faces, "faces_out": cleaned.n_faces})
    return out_ply


def run_eval(args, manifest: PipelineManifest, checkpoint_path, mesh_path,
             out_csv, out_txt) -> None:
    gaussians = io.read_gaussian_ply(_require(checkpoint_path, "checkpoint"))
    views = _load_views(args.images, args.cameras)
    recon = None
    if mesh_path:
        recon = io.read_mesh(_require(mesh_path, "reconstructed mesh"))
    gt = None
    if getattr(args, "gt_mesh", None):
        gt = io.read_mesh(_require(args.gt_mesh, "ground-truth mesh"))
    elif getattr(args, "gt_cloud", None):
        gt = io.read_point_cloud_ply(_require(args.gt_cloud, "ground-truth cloud")).positions
    t0 = time.perf_counter()
    report = metrics.evaluate(
        gaussians, [(v.view_id, v.camera, v.image) for v in views],
        recon_points=recon, gt_points=gt, cd_samples=args.cd_samples,
        cd_squared=args.squared, seed=args.seed or 0)
    with open(out_csv, "w") as fh:
        fh.write(report.to_csv())
    with open(out_txt, "w") as fh:
        fh.write(report.to_text())
    inputs = {"checkpoint": checkpoint_path, "cameras": args.cameras}
    if mesh_path:
        inputs["mesh"] = mesh_path
    manifest.record_stage(
        "eval", inputs, {"report_csv": out_csv, "report_txt": out_txt},
        {"cd_samples": args.cd_samples, "squared": args.squared},
        time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _out_dir(args) -> str:
    out = args.out_dir or "."
    os.makedirs(out, exist_ok=True)
    return out


def cmd_mvs(args) -> int:
    out = _out_dir(args)
    manifest = PipelineManifest(os.path.join(out, "manifest.json"))
    run_mvs(args, manifest, os.path.join(out, "cloud.ply"))
    return EXIT_OK


def cmd_train(args) -> int:
    out = _out_dir(args)
    manifest = PipelineManifest(os.path.join(out, "manifest.json"))
    run_train(args, manifest, args.cloud,
              os.path.join(out, "checkpoint.ply"), os.path.join(out, "loss.csv"))
    return EXIT_OK


def cmd_extract(args) -> int:
    out = _out_dir(args)
    manifest = PipelineManifest(os.path.join(out, "manifest.json"))
    run_extract(args, manifest, args.checkpoint,
                os.path.join(out, "mesh.obj"), os.path.join(out, "mesh.ply"))
    return EXIT_OK


def cmd_denoise(args) -> int:
    out = _out_dir(args)
    manifest = PipelineManifest(os.path.join(out, "manifest.json"))
    run_denoise(args, manifest, args.mesh, args.cloud,
                os.path.join(out, "denoised.obj"), os.path.join(out, "denoised.ply"))
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out_dir(args)
    manifest = PipelineManifest(os.path.join(out, "manifest.json"))
    run_eval(args, manifest, args.checkpoint, args.mesh,
             os.path.join(out, "report.csv"), os.path.join(out, "report.txt"))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    out = _out_dir(args)
    manifest = PipelineManifest(os.path.join(out, "manifest.json"))
    if args.skip_mvs:
        cloud_path = _require(args.cloud, "guidance cloud (with --skip-mvs)")
    else:
        cloud_path = run_mvs(args, manifest, os.path.join(out, "cloud.ply"))
    checkpoint = run_train(args, manifest, cloud_path,
                           os.path.join(out, "checkpoint.ply"),
                           os.path.join(out, "loss.csv"))
    mesh_path = run_extract(args, manifest, checkpoint,
                            os.path.join(out, "mesh.obj"),
                            os.path.join(out, "mesh.ply"))
    denoised = run_denoise(args, manifest, mesh_path, cloud_path,
                           os.path.join(out, "denoised.obj"),
                           os.path.join(out, "denoised.ply"))
    args.mesh = denoised
    run_eval(args, manifest, checkpoint, denoised,
             os.path.join(out, "report.csv"), os.path.join(out, "report.txt"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: GGS_THREADS or 1)")
    p.add_argument("--out-dir", default=None)


def _add_mvs_flags(p: argparse.ArgumentParser):
    p.add_argument("--images", help="directory of per-view PNGs")
    p.add_argument("--cameras", help="camera list text file")
    p.add_argument("--depth-min", type=float, default=1.0)
    p.add_argument("--depth-max", type=float, default=4.0)
    p.add_argument("--downsample", type=int, default=4)
    p.add_argument("--planes", type=int, default=128)
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--neighbors", type=int, default=4)
    p.add_argument("--min-consistent", type=int, default=2)
    p.add_argument("--pixel-tol", type=float, default=1.0)
    p.add_argument("--depth-tol", type=float, default=0.01)
    p.add_argument("--consistency-iterations", type=int, default=1)


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--snap-interval", type=int, default=None)
    p.add_argument("--subsample", type=int, default=None)
    p.add_argument("--init-jitter", type=float, default=None)
    for name in ("move", "flatten", "rotate"):
        p.add_argument(f"--no-{name}", action="store_true")
        p.add_argument(f"--only-{name}", action="store_true")


def _add_eval_flags(p: argparse.ArgumentParser):
    p.add_argument("--gt-mesh", default=None)
    p.add_argument("--gt-cloud", default=None)
    p.add_argument("--cd-samples", type=int, default=metrics.DEFAULT_CD_SAMPLES)
    p.add_argument("--squared", action="store_true",
                   help="use squared distances in the chamfer metric")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ggs",
        description="point-cloud guided Gaussian splatting reconstruction")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mvs", help="dense point cloud from posed images")
    _add_common(p)
    _add_mvs_flags(p)
    p.set_defaults(func=cmd_mvs)

    p = sub.add_parser("train", help="optimize Gaussians against views")
    _add_common(p)
    p.add_argument("--images")
    p.add_argument("--cameras")
    p.add_argument("--cloud", help="guidance point cloud PLY")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="mesh from a trained checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--cameras")
    p.add_argument("--voxel-size", type=float, default=None)
    p.add_argument("--alpha-threshold", type=float,
                   default=mesh_extract.DEFAULT_ALPHA_THRESHOLD)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("denoise", help="LOF-denoise a mesh against a cloud")
    _add_common(p)
    p.add_argument("--mesh")
    p.add_argument("--cloud")
    p.add_argument("--k", type=int, default=lof.DEFAULT_K)
    p.add_argument("--lof-threshold", type=float, default=lof.DEFAULT_THRESHOLD)
    p.add_argument("--min-component-frac", type=float, default=lof.MIN_COMPONENT_FRAC)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="render-quality and geometry metrics")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--images")
    p.add_argument("--cameras")
    p.add_argument("--mesh", default=None)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="full mvs->train->extract->denoise->eval")
    _add_common(p)
    _add_mvs_flags(p)
    _add_train_flags(p)
    p.add_argument("--cloud", help="precomputed guidance cloud (with --skip-mvs)")
    p.add_argument("--skip-mvs", action="store_true")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--mesh", default=None)
    p.add_argument("--voxel-size", type=float, default=None)
    p.add_argument("--alpha-threshold", type=float,
                   default=mesh_extract.DEFAULT_ALPHA_THRESHOLD)
    p.add_argument("--k", type=int, default=lof.DEFAULT_K)
    p.add_argument("--lof-threshold", type=float, default=lof.DEFAULT_THRESHOLD)
    p.add_argument("--min-component-frac", type=float, default=lof.MIN_COMPONENT_FRAC)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ggs {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GgsError as exc:
        print(f"ggs {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
