"""Command-line pipeline: synth, train, render, mesh, eval, viewsweep.

Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
runtime failures. Every subcommand writes the configuration it resolved
(flags over ``--config`` file over defaults) next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .dataio import (SHAPES, TEXTURES, BundleError, generate_synthetic, load_bundle, load_mesh,
                     read_png, save_bundle, save_mesh, save_render_maps)
from .field import load_field
from .losses import ConfigurationError, LossWeights
from .mesher import (DEFAULT_TRUNC_VOXELS, DEFAULT_VOXEL, chamfer_distance, mesh_field, psnr,
                     sample_mesh)
from .rasterizer import rasterize
from .trainer import TrainConfig, TrainResult, train

log = logging.getLogger("solidgs")

THREADS_ENV = "SOLIDGS_THREADS"


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# configuration


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_config_file(path, cfg: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for k in sorted(cfg):
            f.write(f"{k} = {_show(cfg[k])}\n")


def _show(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_show(x) for x in v)
    return str(v)


def _coerce(key: str, value, default):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, (list, tuple)):
            return [float(x) for x in value.split(",")]
    except ValueError:
        raise UsageError(f"bad value for {key}: {value!r}") from None
    return value


def _train_defaults(total_iters: int) -> dict:
    cfg = TrainConfig.scaled(total_iters)
    return cfg.to_dict()


def resolve_train_config(file_cfg: dict, flag_cfg: dict) -> TrainConfig:
    """Merge defaults, config file and flags (later wins) into a TrainConfig.

    The schedule defaults are scaled to ``total_iters`` before overrides apply.
    """
    known = set(_train_defaults(10000))
    merged = {}
    for source in (file_cfg, flag_cfg):
        for k, v in source.items():
            if k not in known:
                raise UsageError(f"unknown training option {k!r}")
            merged[k] = v
    iters = _coerce("total_iters", merged.get("total_iters", 10000), 10000)
    defaults = _train_defaults(iters)
    values = {k: _coerce(k, v, defaults[k]) for k, v in merged.items()}
    weights = {k.split(".", 1)[1]: values.pop(k) for k in list(values) if k.startswith("weights.")}
    values.pop("total_iters", None)
    w = LossWeights(**{f.name: weights.get(f.name, getattr(LossWeights(), f.name))
                       for f in fields(LossWeights)})
    return TrainConfig.scaled(iters, weights=w, **values)


def _flags(args, names) -> dict:
    return {key: getattr(args, attr) for attr, key in names.items() if getattr(args, attr) is not None}


def _apply_threads(args) -> None:
    n = args.threads
    if n is None and os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer") from None
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be at least 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ----------------------------------------------------------------------------
# subcommands


SYNTH_DEFAULTS = dict(shape="sphere", texture="checker", views=3, holdout=2, resolution=128,
                      kappa=math.inf, seed=0, points=6000, point_noise=0.01, reference_views=0,
                      background=[0.0, 0.0, 0.0])


def _resolve(defaults: dict, args) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            if k not in defaults:
                raise UsageError(f"unknown option {k!r} in {args.config}")
            cfg[k] = _coerce(k, v, defaults[k])
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def cmd_synth(args) -> int:
    cfg = _resolve(SYNTH_DEFAULTS, args)
    if cfg["views"] < 2:
        raise UsageError("--views must be at least 2")
    if cfg["shape"] not in SHAPES or cfg["texture"] not in TEXTURES:
        raise UsageError(f"unknown shape or texture: {cfg['shape']}, {cfg['texture']}")
    if cfg["resolution"] < 8 or cfg["holdout"] < 0 or cfg["points"] < 1:
        raise UsageError("resolution must be >= 8, holdout >= 0 and points >= 1")
    bundle = generate_synthetic(cfg["shape"], cfg["texture"], cfg["views"], cfg["holdout"],
                                cfg["resolution"], cfg["kappa"], cfg["seed"], cfg["points"],
                                cfg["point_noise"], tuple(cfg["background"]),
                                reference_views=cfg["reference_views"] or None)
    save_bundle(bundle, args.out)
    write_config_file(Path(args.out) / "synth_config.txt", cfg)
    print(f"wrote {cfg['shape']} bundle with {cfg['views']} views to {args.out}")
    return 0


TRAIN_FLAGS = {"iters": "total_iters", "seed": "seed", "lambda_d": "weights.lambda_d",
               "lambda_nc": "weights.lambda_nc", "lambda_nr": "weights.lambda_nr",
               "lambda_nd": "weights.lambda_nd", "lambda_1": "weights.lambda_1",
               "lr_beta": "lr_beta", "max_gaussians": "max_gaussians",
               "checkpoint_interval": "checkpoint_interval", "eval_interval": "eval_interval"}


def _train_config(args) -> TrainConfig:
    file_cfg = read_config_file(args.config) if args.config else {}
    flags = _flags(args, TRAIN_FLAGS)
    if args.no_priors:
        flags["use_priors"] = False
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = v.strip()
    return resolve_train_config(file_cfg, flags)


def _run_training(bundle, cfg: TrainConfig, out: Path, quiet=False) -> TrainResult:
    from .plots import plot_training

    def progress(it, row):
        if not quiet and (it % 100 == 0 or it == cfg.total_iters):
            log.info("iter %d  L_c %.4f  beta %.3f  gaussians %d", it, row["L_c"], row["beta_g"],
                     row["num_gaussians"])

    write_config_file(out / "config.txt", cfg.to_dict())
    res = train(bundle, cfg, out, progress)
    if res.metrics:
        plot_training(res.metrics, out / "training.png")
    return res


def cmd_train(args) -> int:
    cfg = _train_config(args)
    bundle = load_bundle(args.bundle)
    out = Path(args.out)
    res = _run_training(bundle, cfg, out)
    print(f"trained {cfg.total_iters} iterations: {res.field.count} Gaussians, "
          f"beta {res.field.beta:.3f}; outputs in {out}")
    return 0


def cmd_render(args) -> int:
    bundle = load_bundle(args.bundle)
    field = load_field(args.checkpoint)
    cams = bundle.holdout_cameras if args.holdout else bundle.cameras
    prefix = "holdout" if args.holdout else "view"
    if not cams:
        raise UsageError("the bundle has no holdout views" if args.holdout else "the bundle has no views")
    out = Path(args.out)
    for k, cam in enumerate(cams):
        save_render_maps(rasterize(field, cam, bundle.background), out, f"{prefix}{k:03d}")
    write_config_file(out / "render_config.txt", {"bundle": args.bundle, "checkpoint": args.checkpoint,
                                                   "holdout": bool(args.holdout)})
    print(f"rendered {len(cams)} views to {out}")
    return 0


def _scene_radius(bundle) -> float:
    r = bundle.meta.get("scene_radius")
    if r:
        return float(r)
    pts = bundle.init_points
    if pts is None or len(pts) == 0:
        return 1.0
    center = 0.5 * (pts.min(0) + pts.max(0))
    return float(np.max(np.linalg.norm(pts - center, axis=1))) or 1.0


def _mesh_params(args, bundle):
    voxel = args.voxel if args.voxel is not None else DEFAULT_VOXEL * _scene_radius(bundle)
    trunc = args.trunc if args.trunc is not None else DEFAULT_TRUNC_VOXELS * voxel
    if not voxel > 0:
        raise UsageError("--voxel must be positive")
    if trunc < voxel:
        raise UsageError(f"--trunc {trunc} is below the voxel size {voxel}")
    return voxel, trunc


def cmd_mesh(args) -> int:
    bundle = load_bundle(args.bundle)
    voxel, trunc = _mesh_params(args, bundle)
    field = load_field(args.checkpoint)
    mesh, _ = mesh_field(field, bundle.cameras, voxel, trunc, bundle.background)
    if mesh.empty:
        log.warning("no surface crossing found; writing an empty mesh")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(out, mesh)
    write_config_file(out.with_suffix(".config.txt"), {"bundle": args.bundle, "checkpoint": args.checkpoint,
                                                        "voxel": voxel, "trunc": trunc})
    print(f"mesh with {len(mesh.vertices)} vertices and {len(mesh.triangles)} triangles -> {out}")
    return 0


def _reference_points(bundle, n_samples: int, seed: int):
    if bundle.gt_points is not None and len(bundle.gt_points):
        return bundle.gt_points
    if bundle.gt_mesh is not None and not bundle.gt_mesh.empty:
        return sample_mesh(bundle.gt_mesh, n_samples, np.random.default_rng(seed))
    return None


def _holdout_psnr_rows(bundle, field=None, renders=None) -> list:
    rows = []
    for k, (cam, gt) in enumerate(zip(bundle.holdout_cameras, bundle.holdout_images)):
        if field is not None:
            img = np.clip(rasterize(field, cam, bundle.background).color, 0, 1)
        else:
            path = Path(renders) / f"holdout{k:03d}_color.png"
            if not path.exists():
                raise UsageError(f"missing holdout render {path}")
            img = read_png(path)
        rows.append({"view": cam.name or f"holdout{k:03d}", "psnr": psnr(img, gt)})
    return rows


def evaluate(bundle, mesh=None, field=None, renders=None, n_samples=100000, seed=0) -> dict:
    report = {"psnr": [], "chamfer": None}
    if mesh is not None:
        ref = _reference_points(bundle, n_samples, seed)
        if ref is None:
            raise UsageError("the bundle has no ground-truth mesh or points for Chamfer evaluation")
        if mesh.empty:
            report["chamfer"] = {"accuracy": math.inf, "completion": math.inf, "chamfer": math.inf}
        else:
            acc, comp, cd = chamfer_distance(mesh, ref, n_samples, seed)
            report["chamfer"] = {"accuracy": acc, "completion": comp, "chamfer": cd}
    if field is not None or renders is not None:
        report["psnr"] = _holdout_psnr_rows(bundle, field, renders)
    return report


def write_eval_report(report: dict, out: Path) -> None:
    from .plots import plot_eval

    out.mkdir(parents=True, exist_ok=True)
    lines = []
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "view", "value"])
        if report["chamfer"] is not None:
            for k, v in report["chamfer"].items():
                w.writerow([k, "", f"{v:.6g}"])
            c = report["chamfer"]
            lines.append(f"Chamfer  accuracy {c['accuracy']:.5f}  completion {c['completion']:.5f}  "
                         f"mean {c['chamfer']:.5f}")
        for r in report["psnr"]:
            w.writerow(["psnr", r["view"], f"{r['psnr']:.6g}"])
        if report["psnr"]:
            lines.append("PSNR (dB)")
            lines.extend(f"  {r['view']:<14s} {r['psnr']:7.3f}" for r in report["psnr"])
            lines.append(f"  {'mean':<14s} {np.mean([r['psnr'] for r in report['psnr']]):7.3f}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    if report["psnr"]:
        plot_eval(report["psnr"], report["chamfer"], out / "report.png")


def cmd_eval(args) -> int:
    bundle = load_bundle(args.bundle)
    if args.chamfer and args.mesh is None:
        raise UsageError("--chamfer needs --mesh")
    if not args.chamfer and args.checkpoint is None and args.renders is None:
        raise UsageError("nothing to evaluate: pass --mesh with --chamfer, --checkpoint or --renders")
    if args.chamfer and _reference_points(bundle, 10, 0) is None:
        raise UsageError("the bundle has no ground-truth mesh or points for Chamfer evaluation")
    mesh = load_mesh(args.mesh) if args.chamfer else None
    field = load_field(args.checkpoint) if args.checkpoint else None
    if (field is not None or args.renders) and not bundle.holdout_cameras:
        raise UsageError("the bundle has no holdout views for PSNR")
    report = evaluate(bundle, mesh, field, args.renders, args.samples, args.seed)
    out = Path(args.out)
    write_eval_report(report, out)
    write_config_file(out / "eval_config.txt", {"bundle": args.bundle, "mesh": args.mesh or "",
                                                 "checkpoint": args.checkpoint or "",
                                                 "renders": args.renders or "", "samples": args.samples,
                                                 "seed": args.seed})
    print((out / "report.txt").read_text(), end="")
    return 0


def run_viewsweep(views, out: Path, cfg: TrainConfig, bundle=None, shape="sphere", texture="checker",
                  resolution=128, seed=0, n_samples=100000) -> list:
    """Train, mesh and score one reconstruction per view count."""
    views = sorted(set(int(v) for v in views))
    if not views:
        raise UsageError("the view list is empty")
    if views[0] < 2:
        raise UsageError("every view count must be at least 2")
    rows = []
    for v in views:
        if bundle is None:
            b = generate_synthetic(shape, texture, n_train=v, resolution=resolution, seed=seed,
                                   reference_views=max(views))
        else:
            if v > len(bundle.cameras):
                raise UsageError(f"the bundle has only {len(bundle.cameras)} views")
            pick = np.unique(np.round(np.linspace(0, len(bundle.cameras) - 1, v)).astype(int))
            b = bundle.subset(pick)
        run_dir = out / f"views_{v}"
        res = _run_training(b, cfg, run_dir, quiet=True)
        voxel = DEFAULT_VOXEL * _scene_radius(b)
        mesh, _ = mesh_field(res.field, b.cameras, voxel, DEFAULT_TRUNC_VOXELS * voxel, b.background)
        save_mesh(run_dir / "mesh.ply", mesh)
        rep = evaluate(b, mesh, res.field, n_samples=n_samples, seed=seed)
        c = rep["chamfer"]
        row = {"views": v, "accuracy": c["accuracy"], "completion": c["completion"], "chamfer": c["chamfer"],
               "psnr": float(np.mean([r["psnr"] for r in rep["psnr"]])) if rep["psnr"] else math.nan}
        log.info("views %d: CD %.5f  PSNR %.2f", v, row["chamfer"], row["psnr"])
        rows.append(row)
    write_viewsweep_report(rows, out)
    return rows


def write_viewsweep_report(rows, out: Path) -> None:
    from .plots import plot_viewsweep

    out.mkdir(parents=True, exist_ok=True)
    cols = ("views", "accuracy", "completion", "chamfer", "psnr")
    with open(out / "viewsweep.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["views"]] + [f"{r[c]:.6g}" for c in cols[1:]])
    lines = [f"{'views':>5s} {'Accu.':>9s} {'Comp.':>9s} {'CD':>9s} {'PSNR':>7s}"]
    lines += [f"{r['views']:>5d} {r['accuracy']:9.5f} {r['completion']:9.5f} {r['chamfer']:9.5f} "
              f"{r['psnr']:7.2f}" for r in rows]
    (out / "viewsweep.txt").write_text("\n".join(lines) + "\n")
    plot_viewsweep(rows, out / "viewsweep.png")


def cmd_viewsweep(args) -> int:
    if not args.views:
        raise UsageError("the view list is empty")
    cfg = _train_config(args)
    bundle = load_bundle(args.bundle) if args.bundle else None
    out = Path(args.out)
    write_config_file(out / "viewsweep_config.txt",
                      dict(cfg.to_dict(), views=",".join(str(v) for v in args.views), shape=args.shape,
                           texture=args.texture, resolution=args.resolution, bundle=args.bundle or ""))
    rows = run_viewsweep(args.views, out, cfg, bundle, args.shape, args.texture, args.resolution,
                         cfg.seed, args.samples)
    print((out / "viewsweep.txt").read_text(), end="")
    return 0 if rows else 1


# ----------------------------------------------------------------------------
# argument parsing


def _views_list(text: str) -> list:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of view counts: {text!r}") from None


def _add_train_flags(p) -> None:
    p.add_argument("--config", help="key = value file of training options")
    p.add_argument("--iters", type=int, help="total iterations; the schedule scales with it")
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-d", dest="lambda_d", type=float)
    p.add_argument("--lambda-nc", dest="lambda_nc", type=float)
    p.add_argument("--lambda-nr", dest="lambda_nr", type=float)
    p.add_argument("--lambda-nd", dest="lambda_nd", type=float)
    p.add_argument("--lambda-1", dest="lambda_1", type=float)
    p.add_argument("--lr-beta", dest="lr_beta", type=float)
    p.add_argument("--max-gaussians", dest="max_gaussians", type=int)
    p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    p.add_argument("--eval-interval", dest="eval_interval", type=int)
    p.add_argument("--no-priors", action="store_true", help="disable the prior normal losses")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="any TrainConfig field, e.g. densify_grad_threshold=3e-4")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="solidgs", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, help=f"worker threads (falls back to ${THREADS_ENV})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a ray-traced synthetic bundle")
    p.add_argument("--config")
    p.add_argument("--shape", choices=sorted(SHAPES))
    p.add_argument("--texture", choices=TEXTURES)
    p.add_argument("--views", type=int)
    p.add_argument("--holdout", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--kappa", type=float, help="prior-normal vMF concentration (inf = exact)")
    p.add_argument("--seed", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--point-noise", dest="point_noise", type=float)
    p.add_argument("--reference-views", dest="reference_views", type=int,
                   help="ring views fused into the Chamfer reference (default: --views)")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimize a field on a bundle")
    p.add_argument("bundle")
    _add_train_flags(p)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render maps of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("bundle")
    p.add_argument("--holdout", action="store_true", help="render the holdout views")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("mesh", help="fuse rendered depth into a mesh")
    p.add_argument("checkpoint")
    p.add_argument("bundle")
    p.add_argument("--voxel", type=float, help="voxel size (default 0.008 x scene radius)")
    p.add_argument("--trunc", type=float, help="truncation distance (default 4 voxels)")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", help="Chamfer distance and holdout PSNR")
    p.add_argument("bundle")
    p.add_argument("--mesh")
    p.add_argument("--chamfer", action="store_true")
    p.add_argument("--checkpoint", help="render holdout views from this field")
    p.add_argument("--renders", help="directory of holdoutNNN_color.png renders")
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viewsweep", help="reconstruction quality against input view count")
    p.add_argument("--views", type=_views_list, required=True, help="e.g. '2,3,6'")
    p.add_argument("--bundle", help="take view subsets of this bundle instead of synthesizing")
    p.add_argument("--shape", default="sphere", choices=sorted(SHAPES))
    p.add_argument("--texture", default="checker", choices=TEXTURES)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--samples", type=int, default=100000)
    _add_train_flags(p)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_viewsweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads(args)
        return args.func(args)
    except (UsageError, ConfigurationError, BundleError) as exc:
        print(f"solidgs {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"solidgs {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
