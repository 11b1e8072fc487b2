"""Command-line interface.

Subcommands: synth, refine-pinhole, refine-fisheye, fit, render, eval,
export-mesh.  Exit codes: 0 success, 1 usage error, 2 data/config error,
3 optimization divergence.  Diagnostics go to stderr; the FBINERF_LOG
environment variable sets the log level.

Commands never modify their input dataset directory; outputs go to a
separate path guarded by a lockfile (concurrent runs on one output are
unsupported).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .dataset import (
    Dataset,
    camera_from_record,
    dataset_from_scene,
    init_depth,
    load_dataset,
    save_dataset,
    save_image,
)
from .cameras import FisheyeCamera
from .errors import ConfigError, Diverged, FbinerfError
from .field import Frame, VoxelField, export_mesh, fit_field, load_field, render_image, save_field, write_obj, write_ply
from .metrics import evaluate
from .optimizer import refine_fisheye, refine_pinhole
from .synth import PosedPinhole, generate_scene

log = logging.getLogger(__name__)

_LOCK_NAME = ".fbinerf.lock"
_THREAD_LIMITER = None  # keeps a threadpoolctl limiter alive for the process


class UsageError(Exception):
    def __init__(self, message: str, parser: argparse.ArgumentParser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self)


def _setup_logging() -> None:
    level_name = os.environ.get("FBINERF_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s"
    )


def _limit_threads(n: int) -> None:
    if not n or n <= 0:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    global _THREAD_LIMITER
    try:
        import threadpoolctl

        _THREAD_LIMITER = threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        log.debug("threadpoolctl unavailable; thread limit applies to new pools only")


@contextmanager
def _locked(root: Path):
    """Exclusive ownership of an output directory via a lockfile."""
    root.mkdir(parents=True, exist_ok=True)
    lock = root / _LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"output {root} is locked by another run; remove {lock} if stale"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _fmt_cell(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_history(path, rows) -> None:
    """History CSV with full-precision floats; byte-stable across runs."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if not rows:
            return
        names = list(rows[0].keys())
        writer.writerow(names)
        for row in rows:
            writer.writerow([_fmt_cell(row[k]) for k in names])


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed, synth=replace(cfg.synth, seed=args.seed))
    return cfg


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = load_config(args.spec)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, synth=replace(cfg.synth, seed=args.seed))
    scene = generate_scene(cfg.synth)
    ds = dataset_from_scene(scene)
    out = Path(args.out)
    with _locked(out):
        save_dataset(ds, out)
    log.info("wrote %d frames to %s", len(ds.images), out)
    return 0


def _require_kind(ds: Dataset, kind: str, command: str) -> None:
    if ds.kind != kind:
        raise ConfigError(f"{command} needs a {kind} dataset, got {ds.kind}")


def cmd_refine_pinhole(args) -> int:
    ds = load_dataset(args.dataset)
    _require_kind(ds, "pinhole", "refine-pinhole")
    cfg = _base_config(args)
    source = args.depth_init or cfg.depth_init
    depths = init_depth(ds, source, constant=cfg.constant_depth, align=cfg.scale_align)
    poses, depth_t, history = refine_pinhole(
        ds, depths[args.target], ds.poses, cfg.optimizer, target=args.target
    )
    out = Path(args.out)
    with _locked(out):
        cams = [PosedPinhole(ds.camera, p) for p in poses]
        new_depths = list(depths)
        new_depths[args.target] = depth_t
        save_dataset(Dataset(ds.images, cams, new_depths), out)
        write_history(out / "history.csv", history)
    return 0


def cmd_refine_fisheye(args) -> int:
    ds = load_dataset(args.dataset)
    _require_kind(ds, "fisheye", "refine-fisheye")
    cfg = _base_config(args)
    oc = cfg.optimizer
    if args.optimize_distortion:
        oc = replace(oc, optimize_distortion=True)
    if oc.depth_source in ("ground_truth", "estimate") and ds.depths is None:
        raise ConfigError("optimizer depth_source needs depth/ maps in the dataset")
    params, history = refine_fisheye(ds, ds.cameras, oc)
    out = Path(args.out)
    with _locked(out):
        save_dataset(Dataset(ds.images, list(params), ds.depths), out)
        write_history(out / "history.csv", history)
    return 0


def cmd_fit(args) -> int:
    ds = load_dataset(args.dataset)
    cfg = _base_config(args)
    fc = cfg.field_cfg
    if ds.kind == "fisheye":
        frames = [Frame(im, cam) for im, cam in zip(ds.images, ds.cameras)]
    else:
        frames = [Frame(im, ds.camera, cam.pose) for im, cam in zip(ds.images, ds.cameras)]
    res = (fc.resolution,) * 3
    bounds = np.stack([np.asarray(fc.bounds_min), np.asarray(fc.bounds_max)])
    field0 = VoxelField.zeros(res, bounds)
    field0.density = np.full_like(field0.density, fc.init_density)
    field0.color = np.full_like(field0.color, fc.init_color)
    rows = []
    fitted = fit_field(
        field0,
        frames,
        iterations=fc.iterations,
        lr=fc.lr,
        n_samples=fc.n_samples,
        rays_per_batch=fc.rays_per_batch,
        background=np.asarray(fc.background, dtype=np.float64),
        seed=cfg.seed,
        eval_every=fc.eval_every,
        patience=fc.patience,
        callback=lambda it, loss, _f: rows.append({"iteration": it, "loss": loss}),
    )
    save_field(fitted, args.field_out)
    write_history(Path(f"{args.field_out}.history.csv"), rows)
    return 0


def cmd_render(args) -> int:
    field = load_field(args.field)
    rec = json.loads(Path(args.camera).read_text())
    if isinstance(rec, list):
        if not rec:
            raise ConfigError(f"{args.camera} holds an empty camera list")
        rec = rec[0]
    cam = camera_from_record(rec)
    cfg = _base_config(args)
    n_samples = args.samples or cfg.field_cfg.n_samples
    background = np.asarray(cfg.field_cfg.background, dtype=np.float64)
    if isinstance(cam, FisheyeCamera):
        image, _ = render_image(field, cam, n_samples=n_samples, background=background)
    else:
        image, _ = render_image(
            field, cam.camera, cam.pose, n_samples=n_samples, background=background
        )
    save_image(args.out, image)
    return 0


def cmd_eval(args) -> int:
    est = load_dataset(args.estimate)
    truth = load_dataset(args.truth)
    both_depths = est.depths is not None and truth.depths is not None
    report = evaluate(
        est.images,
        truth.images,
        est.cameras,
        truth.cameras,
        est.depths if both_depths else None,
        truth.depths if both_depths else None,
    )
    print(report.summary())

    def safe(v):
        if v is None:
            return None
        if isinstance(v, (list, np.ndarray)):
            return [safe(float(x)) for x in v]
        return float(v) if np.isfinite(v) else repr(float(v))

    payload = {
        "psnr": safe(report.psnr),
        "ssim": safe(report.ssim),
        "rot_err_deg": safe(report.rot_err_deg),
        "trans_err": safe(report.trans_err),
        "depth_abs_rel": safe(report.depth_abs_rel),
    }
    print(json.dumps(payload))
    return 0


def cmd_export_mesh(args) -> int:
    field = load_field(args.field)
    mesh = export_mesh(field, args.iso)
    suffix = Path(args.out).suffix.lower()
    if suffix == ".ply":
        write_ply(mesh, args.out)
    elif suffix == ".obj":
        write_obj(mesh, args.out)
    else:
        raise ConfigError(f"unsupported mesh format {suffix!r} (use .ply or .obj)")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every config seed")
    common.add_argument("--threads", type=int, default=0, help="cap BLAS/worker threads")
    common.add_argument("--config", default=None, help="run configuration file")

    parser = _Parser(prog="fbinerf", description="Bundle adjustment and voxel field toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("spec", help="scene/run configuration file")
    p.add_argument("out", help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("refine-pinhole", parents=[common], help="joint pose + depth refinement")
    p.add_argument("dataset")
    p.add_argument("out", help="refined dataset directory")
    p.add_argument("--depth-init", choices=("constant", "priors", "ground_truth"), default=None)
    p.add_argument("--target", type=int, default=0, help="target frame index")
    p.set_defaults(func=cmd_refine_pinhole)

    p = sub.add_parser("refine-fisheye", parents=[common], help="flexible bundle adjustment")
    p.add_argument("dataset")
    p.add_argument("out", help="refined dataset directory")
    p.add_argument("--optimize-distortion", action="store_true")
    p.set_defaults(func=cmd_refine_fisheye)

    p = sub.add_parser("fit", parents=[common], help="fit a voxel radiance field")
    p.add_argument("dataset")
    p.add_argument("field_out", help="output checkpoint file")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", parents=[common], help="render a novel view")
    p.add_argument("field")
    p.add_argument("camera", help="JSON camera record (or list; first entry used)")
    p.add_argument("out", help="output PNG")
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="compare two datasets")
    p.add_argument("estimate")
    p.add_argument("truth")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-mesh", parents=[common], help="extract an iso-surface mesh")
    p.add_argument("field")
    p.add_argument("out", help="output .ply or .obj")
    p.add_argument("--iso", type=float, required=True)
    p.set_defaults(func=cmd_export_mesh)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc.parser.format_usage(), end="", file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    _limit_threads(args.threads)
    try:
        return args.func(args)
    except Diverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3
    except (FbinerfError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
