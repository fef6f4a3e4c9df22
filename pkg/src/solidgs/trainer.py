"""Optimization loop: Adam, adaptive density control, solidness resets, virtual views."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field as dc_field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .dataio import save_render_maps
from .field import BETA_RAW_INIT, GaussianField, logit, save_field
from .geometry import Camera, quat_to_rotation, sample_virtual_view
from .losses import ConfigurationError, LossWeights, geometric_terms, total_loss
from .mesher import psnr
from .rasterizer import RenderSettings, backward, rasterize

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "L_c", "L_nc", "L_d", "L_nr", "L_nd", "L_s", "beta_g", "num_gaussians",
                  "psnr_holdout")
INIT_OPACITY = 0.1
SPLIT_FACTOR = 1.6


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    total_iters: int = 10000
    densify_until: int = 5000
    densify_from: int = 500
    densify_interval: int = 100
    geo_reg_start: int = 1000
    beta_reset_interval: int = 1000
    beta_reset_until: int = 5000
    virtual_view_interval: int = 50
    virtual_noise: float = 0.02
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_color: float = 2.5e-3
    lr_beta: float = 1e-2
    densify_grad_threshold: float = 2e-4
    prune_opacity_threshold: float = 5e-3
    percent_dense: float = 0.01
    max_gaussians: int = 20000
    use_priors: bool = True
    distortion_depth: str = "ndc"
    checkpoint_interval: int = 1000
    eval_interval: int = 500
    seed: int = 0
    weights: LossWeights = dc_field(default_factory=LossWeights)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.total_iters < 0:
            raise ConfigurationError("total_iters must be non-negative")
        if self.total_iters > 0 and not (self.geo_reg_start < self.densify_until <= self.total_iters):
            raise ConfigurationError("need geo_reg_start < densify_until <= total_iters")
        rates = [getattr(self, f.name) for f in fields(self) if f.name.startswith("lr_")]
        if any(not r > 0 for r in rates):
            raise ConfigurationError("all learning rates must be positive")
        try:
            RenderSettings(distortion_depth=self.distortion_depth).depth_map
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None
        for name in ("densify_interval", "beta_reset_interval", "virtual_view_interval",
                     "checkpoint_interval", "eval_interval"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")

    @classmethod
    def scaled(cls, total_iters: int, **overrides) -> "TrainConfig":
        """Default schedule compressed proportionally to ``total_iters``."""
        base = cls()
        k = total_iters / base.total_iters

        def sc(v):
            return max(1, int(round(v * k)))

        cfg = dict(total_iters=total_iters, densify_until=sc(base.densify_until),
                   densify_from=sc(base.densify_from), geo_reg_start=sc(base.geo_reg_start),
                   beta_reset_interval=sc(base.beta_reset_interval),
                   beta_reset_until=sc(base.beta_reset_until))
        if total_iters == 0:
            cfg.update(densify_until=0, geo_reg_start=0)
        else:
            # very short runs still need geo_reg_start < densify_until <= total_iters
            du = min(max(cfg["densify_until"], 2), total_iters)
            cfg.update(densify_until=du, geo_reg_start=min(cfg["geo_reg_start"], du - 1),
                       densify_from=min(cfg["densify_from"], du))
        cfg.update(overrides)
        return cls(**cfg)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "weights"}
        d.update({f"weights.{f.name}": getattr(self.weights, f.name) for f in fields(self.weights)})
        return d


# ----------------------------------------------------------------------------
# optimizer


class Adam:
    """Per-array Adam with rows that follow densification and pruning."""

    def __init__(self, params: dict, lrs: dict, b1=0.9, b2=0.999, eps=1e-15):
        self.lrs = dict(lrs)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
        self.v = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, params: dict, grads: dict) -> dict:
        out = {}
        for k, g in grads.items():
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1**t)
            vhat = self.v[k] / (1 - self.b2**t)
            out[k] = params[k] - self.lrs[k] * mhat / (np.sqrt(vhat) + self.eps)
        return out

    def reset(self, key: str) -> None:
        self.m[key] = np.zeros_like(self.m[key])
        self.v[key] = np.zeros_like(self.v[key])
        self.t[key] = 0


def position_lr(cfg: TrainConfig, it: int) -> float:
    """Log-linear decay from ``lr_position`` to ``lr_position_final``."""
    if cfg.total_iters <= 0:
        return cfg.lr_position
    t = min(max(it / cfg.total_iters, 0.0), 1.0)
    return math.exp((1 - t) * math.log(cfg.lr_position) + t * math.log(cfg.lr_position_final))


# ----------------------------------------------------------------------------
# initialization and density control


def init_from_points(points, colors=None, fallback_extent: float = 1.0) -> GaussianField:
    """Isotropic Gaussians at the points, sized by the mean distance to 3 neighbors."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise ValueError("cannot initialize from an empty point cloud")
    if n == 1:
        scale = np.array([0.01 * fallback_extent])
    else:
        k = min(3, n - 1)
        dist, _ = cKDTree(pts).query(pts, k + 1)
        scale = dist[:, 1:].mean(axis=1)
        tiny = scale <= 0
        if np.any(tiny):
            scale[tiny] = 0.01 * fallback_extent
    c = np.full((n, 3), 0.5) if colors is None else np.asarray(colors, dtype=np.float64).reshape(n, 3)
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return GaussianField(pts.copy(), q, np.repeat(np.log(scale)[:, None], 3, axis=1),
                         np.full(n, logit(INIT_OPACITY)), c.copy(), BETA_RAW_INIT)


@dataclass
class DensifyStats:
    grad_accum: np.ndarray
    denom: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    def add(self, grad_ndc_norm, visible) -> None:
        self.grad_accum[visible] += grad_ndc_norm[visible]
        self.denom[visible] += 1

    def mean(self) -> np.ndarray:
        return np.where(self.denom > 0, self.grad_accum / np.maximum(self.denom, 1), 0.0)


def densify_and_prune(field: GaussianField, grads, cfg: TrainConfig, it: int, extent: float,
                      rng: np.random.Generator):
    """Clone small and split large high-gradient Gaussians, then prune transparent ones.

    ``grads`` holds the per-Gaussian mean screen-space positional gradient.
    Returns the new field and a row index map (-1 marks fresh Gaussians) for
    carrying optimizer state.
    """
    if it >= cfg.densify_until:
        raise ValueError("densification runs only before densify_until")
    n = field.count
    grads = np.asarray(grads, dtype=np.float64)
    hot = grads >= cfg.densify_grad_threshold
    big = field.scales.max(axis=1) > cfg.percent_dense * extent
    room = max(cfg.max_gaussians - n, 0)
    clone = np.flatnonzero(hot & ~big)
    split = np.flatnonzero(hot & big)
    # keep the strongest candidates when the budget caps growth
    if len(clone) + len(split) > room:
        cand = np.concatenate([clone, split])
        keep = cand[np.argsort(-grads[cand], kind="stable")[:room]]
        clone = np.sort(keep[~big[keep]])
        split = np.sort(keep[big[keep]])

    new_mu, new_s, src = [field.mu[clone]], [field.s[clone]], [clone]
    if len(split):
        R = quat_to_rotation(field.q[split])
        sc = field.scales[split]
        for _ in range(2):
            offs = np.einsum("nij,nj->ni", R, rng.normal(size=(len(split), 3)) * sc)
            new_mu.append(field.mu[split] + offs)
            new_s.append(field.s[split] - math.log(SPLIT_FACTOR))
            src.append(split)
    src = np.concatenate(src)
    keep = np.ones(n, dtype=bool)
    keep[split] = False
    added = GaussianField(np.vstack(new_mu), field.q[src], np.vstack(new_s), field.rho[src],
                          field.c[src], field.beta_raw)
    grown = GaussianField.concat(field.select(keep), added)
    index = np.concatenate([np.flatnonzero(keep), np.full(len(src), -1)])
    alive = grown.opacity >= cfg.prune_opacity_threshold
    log.debug("iter %d: clone %d split %d prune %d", it, len(clone), len(split), int((~alive).sum()))
    return grown.select(alive), index[alive]


def prune_only(field: GaussianField, threshold: float):
    alive = field.opacity >= threshold
    return field.select(alive), np.flatnonzero(alive)


def reset_solidness(field: GaussianField, it: int, cfg: TrainConfig) -> bool:
    """Reset beta_g to 2 on the reset cadence inside the reset window; returns whether it fired."""
    if it <= 0 or it % cfg.beta_reset_interval or it > cfg.beta_reset_until:
        return False
    field.beta_raw = BETA_RAW_INIT
    return True


# ----------------------------------------------------------------------------
# scene normalization


@dataclass
class Normalization:
    center: np.ndarray
    radius: float

    @classmethod
    def from_points(cls, pts) -> "Normalization":
        pts = np.asarray(pts, dtype=np.float64)
        center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
        radius = float(np.max(np.linalg.norm(pts - center, axis=1))) if len(pts) > 1 else 1.0
        return cls(center, radius if radius > 0 else 1.0)

    def camera(self, cam: Camera) -> Camera:
        return cam.with_pose(cam.R, (cam.t + cam.R @ self.center) / self.radius)

    def points(self, p) -> np.ndarray:
        return (np.asarray(p) - self.center) / self.radius

    def to_world(self, f: GaussianField) -> GaussianField:
        return f.transformed(self.radius, self.center)

    def to_unit(self, f: GaussianField) -> GaussianField:
        g = f.transformed(1.0 / self.radius, -self.center / self.radius)
        return g


def camera_extent(cams) -> float:
    centers = np.array([c.center for c in cams])
    return 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    field: GaussianField
    metrics: list
    normalization: Normalization
    reset_iters: list = dc_field(default_factory=list)
    beta_after_reset: float | None = None


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{float(v):.10g}"


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


def holdout_psnr(field: GaussianField, cams, images, background) -> float:
    if not cams:
        return float("nan")
    vals = [psnr(np.clip(rasterize(field, c, background).color, 0, 1), img) for c, img in zip(cams, images)]
    return float(np.mean(vals))


def train(bundle, cfg: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    """Optimize a field on ``bundle``; returns it in world units with the metrics log.

    With ``out_dir`` the metrics CSV is rewritten at every checkpoint, the
    field is saved as ``checkpoint_NNNNN.ply`` plus ``final.ply``, and the
    first training view is rendered into ``renders/``.
    """
    if len(bundle.cameras) < 2:
        raise ValueError("training needs at least two posed views")
    if bundle.init_points is None or len(bundle.init_points) == 0:
        raise ValueError("training needs a non-empty initial point cloud")
    w = cfg.weights
    need_prior = cfg.use_priors and (w.lambda_nr > 0 or w.lambda_nd > 0)
    if need_prior and (not bundle.priors or any(p is None for p in bundle.priors)):
        raise ConfigurationError("prior normal losses are enabled but the bundle has no prior maps")

    rng = np.random.default_rng(cfg.seed)
    norm = Normalization.from_points(bundle.init_points)
    cams = [norm.camera(c) for c in bundle.cameras]
    h_cams = [norm.camera(c) for c in bundle.holdout_cameras]
    bg = bundle.background
    extent = camera_extent(cams)
    settings = RenderSettings(distortion_depth=cfg.distortion_depth)
    field = init_from_points(norm.points(bundle.init_points), bundle.init_colors)
    priors = bundle.priors if need_prior else [None] * len(cams)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    lrs = {"mu": cfg.lr_position, "q": cfg.lr_rotation, "s": cfg.lr_scale, "rho": cfg.lr_opacity,
           "c": cfg.lr_color, "beta_raw": cfg.lr_beta}
    params = dict(field.arrays(), beta_raw=np.array(field.beta_raw))
    opt = Adam(params, lrs)
    stats = DensifyStats.zeros(field.count)
    rows = []
    reset_iters = []
    beta_after_reset = None
    order = []

    def checkpoint(it):
        if out_dir is None:
            return
        world = norm.to_world(field)
        save_field(out_dir / f"checkpoint_{it:05d}.ply", world)
        write_metrics(out_dir / "metrics.csv", rows)
        out = rasterize(world, bundle.cameras[0], bg, settings)
        save_render_maps(out, out_dir / "renders", f"iter{it:05d}_view000")

    if cfg.total_iters == 0:
        checkpoint(0)
    for it in range(1, cfg.total_iters + 1):
        opt.lrs["mu"] = position_lr(cfg, it)
        if not order:
            order = list(rng.permutation(len(cams)))
        k = int(order.pop())
        cam = cams[k]
        geometric = it >= cfg.geo_reg_start
        out = rasterize(field, cam, bg, settings)
        res = total_loss([out], [cam], [bundle.images[k]], [priors[k]], field=field, weights=w,
                         geometric=geometric, use_priors=need_prior)
        if not math.isfinite(res.value):
            raise DivergenceError(it)
        grads = backward(field, cam, out, res.train_grads[0])
        if res.d_s is not None:
            grads.s = grads.s + res.d_s
        comp = res.components
        if geometric and it % cfg.virtual_view_interval == 0:
            a, b = rng.choice(len(cams), size=2, replace=False)
            vcam = sample_virtual_view(cams[int(a)], cams[int(b)], float(rng.uniform()),
                                       cfg.virtual_noise, rng)
            vout = rasterize(field, vcam, bg, settings)
            val, _, vg = geometric_terms(vout, vcam, w)
            if not math.isfinite(val):
                raise DivergenceError(it, "virtual-view loss")
            grads.add(backward(field, vcam, vout, vg))

        # densification statistics from the training view only
        if it < cfg.densify_until:
            g_ndc = np.linalg.norm(grads.mean2d * np.array([cam.width / 2, cam.height / 2]), axis=1)
            stats.add(g_ndc, out.proj.valid)

        new = opt.step(params, {"mu": grads.mu, "q": grads.q, "s": grads.s, "rho": grads.rho,
                                "c": grads.c, "beta_raw": np.array(grads.beta_raw)})
        new["c"] = np.clip(new["c"], 0.0, 1.0)
        params = new
        field = GaussianField(params["mu"], params["q"], params["s"], params["rho"], params["c"],
                              float(params["beta_raw"]))

        if cfg.densify_from <= it < cfg.densify_until and it % cfg.densify_interval == 0:
            field, index = densify_and_prune(field, stats.mean(), cfg, it, extent, rng)
            _remap(opt, index)
            params = dict(field.arrays(), beta_raw=np.array(field.beta_raw))
            stats = DensifyStats.zeros(field.count)
        if reset_solidness(field, it, cfg):
            params["beta_raw"] = np.array(field.beta_raw)
            opt.reset("beta_raw")
            reset_iters.append(it)
            beta_after_reset = field.beta

        row = {"iter": it, "L_c": comp["L_c"], "L_nc": comp["L_nc"], "L_d": comp["L_d"],
               "L_nr": comp["L_nr"], "L_nd": comp["L_nd"], "L_s": comp["L_s"], "beta_g": field.beta,
               "num_gaussians": field.count, "psnr_holdout": float("nan")}
        if it % cfg.eval_interval == 0 or it == cfg.total_iters:
            row["psnr_holdout"] = holdout_psnr(field, h_cams, bundle.holdout_images, bg)
        rows.append(row)
        if progress is not None:
            progress(it, row)
        if it % cfg.checkpoint_interval == 0:
            checkpoint(it)

    world = norm.to_world(field)
    if out_dir is not None:
        save_field(out_dir / "final.ply", world)
        write_metrics(out_dir / "metrics.csv", rows)
    return TrainResult(world, rows, norm, reset_iters, beta_after_reset)


def _remap(opt: Adam, index) -> None:
    """Carry optimizer rows through densification; fresh rows start at zero."""
    index = np.asarray(index)
    old = index >= 0
    for key in opt.m:
        if np.ndim(opt.m[key]) == 0:
            continue
        for store in (opt.m, opt.v):
            a = store[key]
            b = np.zeros((len(index),) + a.shape[1:])
            b[old] = a[index[old]]
            store[key] = b
