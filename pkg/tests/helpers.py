"""Scene builders and finite-difference utilities shared by the tests."""

from __future__ import annotations

import mpmath
import numpy as np

from solidgs.field import GaussianField, beta_raw_of, logit
from solidgs.geometry import Camera
from solidgs.kernel import eval_solid
from solidgs.rasterizer import MAP_NAMES, backward, rasterize
from solidgs.rasterizer import rasterize as _rasterize

PARAM_CLASSES = ("mu", "q", "s", "rho", "c")


def small_camera(size=24, f=30.0) -> Camera:
    return Camera(f, f, size / 2, size / 2, size, size)


def smooth_scene(seed: int, n: int = 6, beta: float = 2.5) -> GaussianField:
    """Few large, mildly tilted splats whose 1/255 contour lies off-image.

    Keeps every pixel in the differentiable regime: no alpha crosses the skip
    floor or the 0.99 clamp, transmittance stays far above termination, and
    depth order is stable under small parameter steps.
    """
    rng = np.random.default_rng(seed)
    mu = np.c_[rng.uniform(-0.4, 0.4, (n, 2)), np.linspace(3.0, 6.0, n) + rng.uniform(-0.05, 0.05, n)]
    q = np.c_[np.ones(n), rng.normal(0, 0.1, (n, 3))]
    s = np.log(np.c_[rng.uniform(0.6, 1.0, n), rng.uniform(1.1, 1.5, n), rng.uniform(0.05, 0.2, n)])
    rho = logit(np.clip(0.4 + rng.normal(0, 0.07, n), 0.2, 0.6))
    return GaussianField(mu, q, s, rho, rng.uniform(0, 1, (n, 3)), beta_raw_of(beta))


def random_scene(seed: int, n: int, depth=(2.0, 6.0), spread=1.0) -> GaussianField:
    """Generic scene: mixed sizes, flattened and round splats, opacities up to 0.999."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(*depth, n)
    mu = np.c_[rng.uniform(-spread, spread, (n, 2)) * z[:, None] / 3.0, z]
    q = rng.normal(size=(n, 4))
    s = rng.uniform(np.log(0.01), np.log(0.4), (n, 3))
    rho = logit(rng.uniform(0.02, 0.999, n))
    beta = float(rng.uniform(1.5, 12.0))
    return GaussianField(mu, q, s, rho, rng.uniform(0, 1, (n, 3)), beta_raw_of(beta))


def weighted_maps_loss(weights: dict):
    def loss(out):
        return float(sum(np.sum(weights[m] * getattr(out, m)) for m in weights))
    return loss


def random_map_weights(cam: Camera, rng, names=MAP_NAMES) -> dict:
    out = {}
    for m in names:
        shape = (cam.height, cam.width, 3) if m in ("color", "normal") else (cam.height, cam.width)
        out[m] = rng.normal(size=shape)
    return out


def fd_gradients(field: GaussianField, cam: Camera, loss, h: float = 1e-4, background=(0.2, 0.3, 0.4),
                 settings=None):
    """Central differences of ``loss(rasterize(...))`` on every raw parameter."""

    def rasterize(f, c, bg):
        return _rasterize(f, c, bg, settings)

    grads = {}
    for name in PARAM_CLASSES:
        base = getattr(field, name)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = field.copy()
            getattr(plus, name)[idx] += h
            minus = field.copy()
            getattr(minus, name)[idx] -= h
            g[idx] = (loss(rasterize(plus, cam, background)) - loss(rasterize(minus, cam, background))) / (2 * h)
        grads[name] = g
    plus, minus = field.copy(), field.copy()
    plus.beta_raw += h
    minus.beta_raw -= h
    grads["beta_raw"] = (loss(rasterize(plus, cam, background)) - loss(rasterize(minus, cam, background))) / (2 * h)
    return grads


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def analytic_gradients(field, cam, d_out, background=(0.2, 0.3, 0.4), settings=None) -> dict:
    out = rasterize(field, cam, background, settings)
    buf = backward(field, cam, out, d_out)
    g = buf.as_dict()
    g["beta_raw"] = buf.beta_raw
    return g


def gradient_parity(field, cam, weights, h=1e-4, background=(0.2, 0.3, 0.4), settings=None) -> dict:
    """Per-class relative error between backward() and central differences."""
    ana = analytic_gradients(field, cam, weights, background, settings)
    num = fd_gradients(field, cam, weighted_maps_loss(weights), h, background, settings)
    return {k: relative_error(ana[k], num[k]) for k in num}


def disk_field(z: float, radius: float, beta: float, rho: float = 0.999, thickness=1e-4, center=(0.0, 0.0)):
    """One fronto-parallel flattened splat (normal along z)."""
    mu = np.array([[center[0], center[1], z]])
    q = np.array([[1.0, 0.0, 0.0, 0.0]])
    s = np.log([[radius, radius, thickness]])
    return GaussianField(mu, q, s, np.array([logit(rho)]), np.array([[0.8, 0.5, 0.2]]), beta_raw_of(beta))


def loss_parity(field, cam, loss_fn, h=1e-4, background=(0.2, 0.3, 0.4)) -> dict:
    """Relative error of a loss's map gradients chained through backward()."""
    out = rasterize(field, cam, background)
    _, grads = loss_fn(out)
    buf = backward(field, cam, out, grads)
    ana = buf.as_dict()
    ana["beta_raw"] = buf.beta_raw
    num = fd_gradients(field, cam, lambda o: loss_fn(o)[0], h, background)
    return {k: relative_error(ana[k], num[k]) for k in num}


def fake_output(h, w, alpha=1.0, normal=(0.0, 0.0, 1.0), zdepth=5.0, distortion=0.0):
    """RenderOutput with constant (or given) maps, for closed-form loss checks."""
    from solidgs.rasterizer import RenderOutput

    def full(v, ch=None):
        v = np.asarray(v, dtype=np.float64)
        shape = (h, w) if ch is None else (h, w, ch)
        return np.broadcast_to(v, shape).copy()

    z = full(zdepth)
    return RenderOutput(color=np.zeros((h, w, 3)), alpha=full(alpha), dist=z.copy(), normal=full(normal, 3),
                        zdepth=z, distortion=full(distortion), contrib_count=np.ones((h, w), dtype=np.int64))


def _mp_weight(m2, beta):
    return mpmath.exp(-mpmath.power(m2 / 2, beta / 2))


def _richardson(f, x, h):
    d1 = (f(x + h) - f(x - h)) / (2 * h)
    d2 = (f(x + h / 2) - f(x - h / 2)) / h
    return (4 * d2 - d1) / 3


def kernel_fd_worst(n_grid=40, h=1e-5):
    """Worst relative error of both partials against central differences.

    The differences are taken in 50-digit arithmetic on an independent
    transcription of the kernel, so float64 cancellation (which swamps
    derivatives near 1e-10 where the weight is ~1) does not pollute the oracle,
    and one Richardson step removes the O(h^2) truncation that dominates in the
    far tail, where the log-weight changes by several percent per step.
    """
    worst = 0.0
    with mpmath.workdps(50):
        hh = mpmath.mpf(h)
        for m2 in np.linspace(0.01, 9.0, n_grid):
            for beta in np.linspace(1.5, 25.0, n_grid):
                k = eval_solid(m2, beta)
                M, B = mpmath.mpf(m2), mpmath.mpf(beta)
                fm = _richardson(lambda x: _mp_weight(x, B), M, hh)
                fb = _richardson(lambda x: _mp_weight(M, x), B, hh)
                for a, n in ((k.d_weight_d_m2, fm), (k.d_weight_d_beta, fb)):
                    if abs(n) < 1e-290:  # float64 underflow region
                        assert abs(a) < 1e-280
                        continue
                    worst = max(worst, float(abs(mpmath.mpf(a) - n) / abs(n)))
    return worst
