"""Training objectives over rendered maps, each paired with its gradient.

Every loss returns ``(value, grads)`` where ``grads`` maps render-map names
(``color``, ``alpha``, ``normal``, ``zdepth``, ``distortion``) to arrays of the
same shape, ready to be passed to :func:`solidgs.rasterizer.backward`.
Per-pixel terms are averaged over the participating pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import Camera
from .rasterizer import RenderOutput, depth_to_normal, depth_to_normal_backward

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
NORMAL_EPS = 1e-12


class ConfigurationError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_d: float = 10000.0
    lambda_nc: float = 0.015
    lambda_nr: float = 0.015
    lambda_nd: float = 0.015
    lambda_1: float = 100.0
    dssim_mix: float = 0.2

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ConfigurationError(f"{name} must be non-negative")


@dataclass
class PriorMaps:
    """Camera-frame monocular normals (facing the camera) and their validity."""

    normal_prior: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        self.normal_prior = np.asarray(self.normal_prior)
        norms = np.linalg.norm(self.normal_prior[self.valid_mask], axis=-1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-3:
            raise ValueError("prior normals must be unit length on valid pixels")


def _gaussian_window():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


_WINDOW = _gaussian_window()
_PAD = SSIM_WINDOW // 2


def _blur(x):
    """Zero-padded separable Gaussian filter over the two image axes (self-adjoint)."""
    y = correlate1d(x, _WINDOW, axis=0, mode="constant")
    return correlate1d(y, _WINDOW, axis=1, mode="constant")


def _valid(x):
    return x[_PAD:-_PAD, _PAD:-_PAD]


def _unvalid(g, shape):
    out = np.zeros(shape)
    out[_PAD:-_PAD, _PAD:-_PAD] = g
    return out


def ssim(x, y, with_grad: bool = False):
    """Mean SSIM over windows lying fully inside the image, and optionally d/dx."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    mx, my = _valid(_blur(x)), _valid(_blur(y))
    sxx = _valid(_blur(x * x)) - mx * mx
    syy = _valid(_blur(y * y)) - my * my
    sxy = _valid(_blur(x * y)) - mx * my
    num1 = 2 * mx * my + SSIM_C1
    num2 = 2 * sxy + SSIM_C2
    den1 = mx * mx + my * my + SSIM_C1
    den2 = sxx + syy + SSIM_C2
    smap = num1 * num2 / (den1 * den2)
    value = float(smap.mean())
    if not with_grad:
        return value
    k = 1.0 / smap.size
    d_mx = k * (2 * my * num2 / (den1 * den2) - smap * 2 * mx / den1)
    d_sxy = k * 2 * num1 / (den1 * den2)
    d_sxx = -k * smap / den2
    # S depends on x through mx, E[x^2] (via sxx) and E[xy] (via sxy)
    d_mean = d_mx - 2 * mx * d_sxx - my * d_sxy
    grad = (_blur(_unvalid(d_mean, x.shape)) + 2 * x * _blur(_unvalid(d_sxx, x.shape))
            + y * _blur(_unvalid(d_sxy, x.shape)))
    return value, grad


def photometric_loss(rendered, gt, dssim_mix: float = 0.2):
    """``(1 - mix) * L1 + mix * (1 - SSIM) / 2`` and its gradient on ``rendered``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {gt.shape}")
    diff = rendered - gt
    l1 = float(np.abs(diff).mean())
    s, ds = ssim(rendered, gt, with_grad=True)
    value = (1 - dssim_mix) * l1 + dssim_mix * (1 - s) / 2
    grad = (1 - dssim_mix) * np.sign(diff) / diff.size - 0.5 * dssim_mix * ds
    return value, grad


def _unit(v):
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, NORMAL_EPS), norm


def _unit_backward(u, norm, g):
    return (g - u * np.sum(u * g, axis=-1, keepdims=True)) / np.maximum(norm, NORMAL_EPS)


def facing_normal(out: RenderOutput):
    """Rendered normals normalized and flipped to face the camera, plus the raw norm."""
    u, norm = _unit(out.normal)
    return -u, norm


def normal_consistency_loss(out: RenderOutput, cam: Camera):
    """Alpha-weighted ``1 - n_depth . n_rendered`` over confidently covered pixels."""
    mask = out.mask
    n_d = depth_to_normal(out.zdepth, cam, mask)
    nr, norm = facing_normal(out)
    use = mask & (np.abs(n_d).sum(-1) > 0) & (norm[..., 0] > NORMAL_EPS)
    count = int(use.sum())
    zeros = {"normal": np.zeros_like(out.normal), "zdepth": np.zeros_like(out.zdepth),
             "alpha": np.zeros_like(out.alpha)}
    if count == 0:
        return 0.0, zeros
    dot = np.sum(n_d * nr, axis=-1)
    per = out.alpha * (1.0 - dot)
    value = float(per[use].sum() / count)
    wgt = np.where(use, out.alpha, 0.0)[..., None] / count
    d_nr = -wgt * n_d
    d_nd = -wgt * nr
    d_normal = _unit_backward(-nr, norm, -d_nr)
    d_z = depth_to_normal_backward(out.zdepth, cam, mask, d_nd)
    d_alpha = np.where(use, 1.0 - dot, 0.0) / count
    return value, {"normal": d_normal, "zdepth": d_z, "alpha": d_alpha}


def depth_distortion_loss(out: RenderOutput):
    mask = out.mask
    count = int(mask.sum())
    if count == 0:
        return 0.0, {"distortion": np.zeros_like(out.distortion)}
    value = float(out.distortion[mask].sum() / count)
    return value, {"distortion": mask / count}


def _prior_terms(n, prior: PriorMaps, use):
    """Mean of ``|n - prior|_1 + (1 - n . prior)`` over ``use`` and its gradient on ``n``."""
    count = int(use.sum())
    if count == 0:
        return 0.0, np.zeros_like(n)
    p = prior.normal_prior
    diff = n - p
    per = np.abs(diff).sum(-1) + 1.0 - np.sum(n * p, axis=-1)
    value = float(per[use].sum() / count)
    grad = np.where(use[..., None], np.sign(diff) - p, 0.0) / count
    return value, grad


def mono_normal_loss(out: RenderOutput, prior: PriorMaps):
    nr, norm = facing_normal(out)
    use = prior.valid_mask & out.mask & (norm[..., 0] > NORMAL_EPS)
    value, d_nr = _prior_terms(nr, prior, use)
    return value, {"normal": _unit_backward(-nr, norm, -d_nr)}


def depth_normal_prior_loss(out: RenderOutput, cam: Camera, prior: PriorMaps):
    mask = out.mask
    n_d = depth_to_normal(out.zdepth, cam, mask)
    use = prior.valid_mask & mask & (np.abs(n_d).sum(-1) > 0)
    value, d_nd = _prior_terms(n_d, prior, use)
    return value, {"zdepth": depth_to_normal_backward(out.zdepth, cam, mask, d_nd)}


def flatten_loss(field):
    """Mean over Gaussians of the smallest scale; gradient on the log-scales."""
    n = field.count
    grad = np.zeros((n, 3))
    if n == 0:
        return 0.0, grad
    scales = field.scales
    axis = np.argmin(field.s, axis=1)
    smin = scales[np.arange(n), axis]
    grad[np.arange(n), axis] = smin / n
    return float(smin.mean()), grad


def _accumulate(target: dict, grads: dict, k: float) -> None:
    for name, g in grads.items():
        if name in target:
            target[name] = target[name] + k * g
        else:
            target[name] = k * g


@dataclass
class LossResult:
    value: float
    components: dict
    train_grads: list = field(default_factory=list)
    virtual_grads: list = field(default_factory=list)
    d_s: np.ndarray | None = None


def geometric_terms(out: RenderOutput, cam: Camera, weights: LossWeights):
    """``lambda_d * L_d + lambda_nc * L_nc`` for one render (the virtual-view objective)."""
    grads = {}
    l_d, g_d = depth_distortion_loss(out)
    l_nc, g_nc = normal_consistency_loss(out, cam)
    _accumulate(grads, g_d, weights.lambda_d)
    _accumulate(grads, g_nc, weights.lambda_nc)
    return weights.lambda_d * l_d + weights.lambda_nc * l_nc, {"L_d": l_d, "L_nc": l_nc}, grads


def total_loss(train_outs, train_cams, gt_images, priors, virtual_outs=(), virtual_cams=(),
               field=None, weights: LossWeights | None = None, geometric: bool = True,
               use_priors: bool = True) -> LossResult:
    """Full objective; training views also carry the geometric terms.

    Each view contributes its own per-pixel means; virtual views only carry
    the geometric terms. The flatten term is added once for the field.
    """
    weights = weights or LossWeights()
    if not train_outs:
        raise ValueError("at least one training view is required")
    need_prior = use_priors and (weights.lambda_nr > 0 or weights.lambda_nd > 0)
    if need_prior and (priors is None or any(p is None for p in priors)):
        raise ConfigurationError("monocular normal losses are enabled but a prior map is missing")
    comp = {"L_c": 0.0, "L_nc": 0.0, "L_d": 0.0, "L_nr": 0.0, "L_nd": 0.0, "L_s": 0.0,
            "L_nc_virtual": 0.0, "L_d_virtual": 0.0}
    total = 0.0
    train_grads = []
    for k, (out, cam, gt) in enumerate(zip(train_outs, train_cams, gt_images)):
        grads = {}
        l_c, g_c = photometric_loss(out.color, gt, weights.dssim_mix)
        comp["L_c"] += l_c
        total += l_c
        _accumulate(grads, {"color": g_c}, 1.0)
        if geometric:
            val, parts, g = geometric_terms(out, cam, weights)
            comp["L_d"] += parts["L_d"]
            comp["L_nc"] += parts["L_nc"]
            total += val
            _accumulate(grads, g, 1.0)
        if need_prior:
            l_nr, g_nr = mono_normal_loss(out, priors[k])
            l_nd, g_nd = depth_normal_prior_loss(out, cam, priors[k])
            comp["L_nr"] += l_nr
            comp["L_nd"] += l_nd
            total += weights.lambda_nr * l_nr + weights.lambda_nd * l_nd
            _accumulate(grads, g_nr, weights.lambda_nr)
            _accumulate(grads, g_nd, weights.lambda_nd)
        train_grads.append(grads)
    virtual_grads = []
    if geometric:
        for out, cam in zip(virtual_outs, virtual_cams):
            val, parts, g = geometric_terms(out, cam, weights)
            comp["L_d_virtual"] += parts["L_d"]
            comp["L_nc_virtual"] += parts["L_nc"]
            total += val
            virtual_grads.append(g)
    d_s = None
    if field is not None and weights.lambda_1 > 0:
        l_s, g_s = flatten_loss(field)
        comp["L_s"] = l_s
        total += weights.lambda_1 * l_s
        d_s = weights.lambda_1 * g_s
    return LossResult(float(total), comp, train_grads, virtual_grads, d_s)
