"""Tile-based compositing of color, normal, plane-distance and depth maps.

Splats are sorted front to back by the camera-space depth of their centers
(one global order, binned per 16x16 tile). Each pixel composites

    w_i = T_i a_i,   a_i = min(0.99, opacity_i * kernel(m2_i)),   T_i = prod_{j<i} (1 - a_j)

skipping ``a_i < 1/255`` and stopping before the transmittance would fall below
``1e-4``. Depth comes from intersecting the pixel ray with the blended plane,
``zdepth = D / (N . K^-1 [u, v, 1])``. The distortion map holds
``sum_{i<j} w_i w_j |z_i - z_j|`` with ``z_i`` the ray/splat-plane depth,
optionally remapped to normalized device depth ``f/(f-n) * (1 - n/z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from numba import njit, prange

from .field import GaussianField, Projection, project, project_backward, sigmoid
from .geometry import Camera
from .kernel import solid_eval, solid_weight

TILE = 16
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
DEN_MIN = 1e-6
ALPHA_MASK_THRESHOLD = 0.5
MAP_NAMES = ("color", "alpha", "dist", "normal", "zdepth", "distortion")


@dataclass
class RenderSettings:
    # "transmittance": w_i = T_i a_i in the distortion sum; "alpha": the literal a_i a_j form
    distortion_weights: str = "transmittance"
    # "camera": raw depth in the distortion sum; "ndc": f/(f-n) * (1 - n/z)
    distortion_depth: str = "camera"
    near: float = 0.2
    far: float = 100.0

    @property
    def depth_map(self) -> tuple:
        """(scale, near) of the distortion depth remap; near 0 means identity."""
        if self.distortion_depth == "camera":
            return 1.0, 0.0
        if self.distortion_depth == "ndc":
            if not 0 < self.near < self.far:
                raise ValueError("need 0 < near < far for the ndc distortion depth")
            return self.far / (self.far - self.near), self.near
        raise ValueError(f"unknown distortion depth {self.distortion_depth!r}")

    @property
    def weight_mode(self) -> int:
        if self.distortion_weights == "transmittance":
            return 0
        if self.distortion_weights == "alpha":
            return 1
        raise ValueError(f"unknown distortion weighting {self.distortion_weights!r}")


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    dist: np.ndarray
    normal: np.ndarray
    zdepth: np.ndarray
    distortion: np.ndarray
    contrib_count: np.ndarray
    # forward state reused by backward
    final_T: np.ndarray = None
    n_last: np.ndarray = None
    proj: Projection = None
    tile_ranges: np.ndarray = None
    ids: np.ndarray = None
    background: np.ndarray = None
    settings: RenderSettings = None
    diagnostics: dict = dc_field(default_factory=dict)

    @property
    def mask(self) -> np.ndarray:
        return self.alpha > ALPHA_MASK_THRESHOLD


@dataclass
class GradientBuffer:
    mu: np.ndarray
    q: np.ndarray
    s: np.ndarray
    rho: np.ndarray
    c: np.ndarray
    beta_raw: float = 0.0
    mean2d: np.ndarray = None  # screen-space positional gradient (pixels), for densification

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffer":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)),
                   0.0, np.zeros((n, 2)))

    def add(self, other: "GradientBuffer") -> None:
        self.mu += other.mu
        self.q += other.q
        self.s += other.s
        self.rho += other.rho
        self.c += other.c
        self.beta_raw += other.beta_raw
        if other.mean2d is not None:
            self.mean2d = other.mean2d if self.mean2d is None else self.mean2d + other.mean2d

    def scaled(self, k: float) -> "GradientBuffer":
        return GradientBuffer(self.mu * k, self.q * k, self.s * k, self.rho * k, self.c * k,
                              self.beta_raw * k, None if self.mean2d is None else self.mean2d * k)

    def as_dict(self) -> dict:
        return {"mu": self.mu, "q": self.q, "s": self.s, "rho": self.rho, "c": self.c}


def _bin_tiles(proj: Projection, width: int, height: int):
    """Sorted (tile, depth, index) list of splat/tile overlaps and per-tile ranges."""
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    ntiles = tiles_x * tiles_y
    idx = np.flatnonzero(proj.valid)
    mx, my = proj.mean2d[idx, 0], proj.mean2d[idx, 1]
    r = proj.radius[idx]
    # tiles whose pixel centers (k*16 + 0.5 .. k*16 + 15.5) meet the cull square
    tx0 = np.clip(np.ceil((mx - r - (TILE - 0.5)) / TILE), 0, tiles_x).astype(np.int64)
    tx1 = np.clip(np.floor((mx + r - 0.5) / TILE), -1, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.ceil((my - r - (TILE - 0.5)) / TILE), 0, tiles_y).astype(np.int64)
    ty1 = np.clip(np.floor((my + r - 0.5) / TILE), -1, tiles_y - 1).astype(np.int64)
    nx = np.maximum(tx1 - tx0 + 1, 0)
    ny = np.maximum(ty1 - ty0 + 1, 0)
    cnt = nx * ny
    total = int(cnt.sum())
    owner = np.repeat(np.arange(len(idx)), cnt)
    local = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    nxo = nx[owner]
    tile = (ty0[owner] + local // np.maximum(nxo, 1)) * tiles_x + tx0[owner] + local % np.maximum(nxo, 1)
    gid = idx[owner]
    order = np.lexsort((gid, proj.depth[gid], tile))
    tile, gid = tile[order], gid[order]
    starts = np.searchsorted(tile, np.arange(ntiles), side="left")
    ends = np.searchsorted(tile, np.arange(ntiles), side="right")
    return np.stack([starts, ends], axis=1).astype(np.int64), gid.astype(np.int64), tiles_x


@njit(cache=True)
def _remap_depth(z, scale, near):
    if near <= 0.0:
        return z
    return scale * (1.0 - near / z)


@njit(cache=True)
def _remap_slope(z, scale, near):
    if near <= 0.0:
        return 1.0
    return scale * near / (z * z)


@njit(cache=True)
def _pair_distortion(wts, z, k):
    """sum_{i<j} w_i w_j |z_i - z_j| over the first k entries, O(k log k)."""
    if k < 2:
        return 0.0
    order = np.argsort(z[:k])
    wb = 0.0
    sb = 0.0
    acc = 0.0
    for r in range(k):
        i = order[r]
        acc += wts[i] * (z[i] * wb - sb)
        wb += wts[i]
        sb += wts[i] * z[i]
    return acc


@njit(parallel=True, cache=True)
def _forward_kernel(tile_ranges, ids, mean2d, conic, opacity, m2cut, color, n_cam, dplane, beta,
                    width, height, tiles_x, fx, fy, cx, cy, bg, weight_mode, zscale, znear,
                    out_color, out_alpha, out_dist, out_normal, out_z, out_distortion,
                    out_count, out_last, out_T, out_clamped):
    ntiles = tile_ranges.shape[0]
    for t in prange(ntiles):
        start = tile_ranges[t, 0]
        end = tile_ranges[t, 1]
        tx = t % tiles_x
        ty = t // tiles_x
        cap = max(end - start, 1)
        wbuf = np.empty(cap)
        zbuf = np.empty(cap)
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                u = px + 0.5
                v = py + 0.5
                rx = (u - cx) / fx
                ry = (v - cy) / fy
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                nx = 0.0
                ny = 0.0
                nz = 0.0
                D = 0.0
                k = 0
                last = start
                for j in range(start, end):
                    g = ids[j]
                    dx = u - mean2d[g, 0]
                    dy = v - mean2d[g, 1]
                    m2 = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if m2 > m2cut[g]:
                        continue
                    a = opacity[g] * solid_weight(m2, beta)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    test_T = T * (1.0 - a)
                    if test_T < T_MIN:
                        break
                    w = a * T
                    cr += w * color[g, 0]
                    cg += w * color[g, 1]
                    cb += w * color[g, 2]
                    nx += w * n_cam[g, 0]
                    ny += w * n_cam[g, 1]
                    nz += w * n_cam[g, 2]
                    D += w * dplane[g]
                    den_g = n_cam[g, 0] * rx + n_cam[g, 1] * ry + n_cam[g, 2]
                    if den_g < DEN_MIN:
                        den_g = DEN_MIN
                    zbuf[k] = _remap_depth(dplane[g] / den_g, zscale, znear)
                    wbuf[k] = w if weight_mode == 0 else a
                    k += 1
                    T = test_T
                    last = j + 1
                out_color[py, px, 0] = cr + T * bg[0]
                out_color[py, px, 1] = cg + T * bg[1]
                out_color[py, px, 2] = cb + T * bg[2]
                out_alpha[py, px] = 1.0 - T
                out_dist[py, px] = D
                out_normal[py, px, 0] = nx
                out_normal[py, px, 1] = ny
                out_normal[py, px, 2] = nz
                den = nx * rx + ny * ry + nz
                if den < DEN_MIN:
                    den = DEN_MIN
                    out_clamped[py, px] = True
                out_z[py, px] = D / den
                out_distortion[py, px] = _pair_distortion(wbuf, zbuf, k)
                out_count[py, px] = k
                out_last[py, px] = last
                out_T[py, px] = T


def skip_cutoff(opacity, beta: float) -> np.ndarray:
    """Per-splat m^2 beyond which alpha is certainly below ``ALPHA_MIN``.

    Padded by a relative 1e-6 so the shortcut never decides a borderline pair;
    those still go through the exact kernel test.
    """
    op = np.asarray(opacity, dtype=np.float64)
    cut = np.full(op.shape, -1.0)
    live = op >= ALPHA_MIN
    cut[live] = 2.0 * np.log(op[live] / ALPHA_MIN) ** (2.0 / beta)
    cut[live] = cut[live] * (1.0 + 1e-6) + 1e-9
    return cut


def _empty_maps(h, w):
    return (np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)), np.zeros((h, w, 3)),
            np.zeros((h, w)), np.zeros((h, w)), np.zeros((h, w), dtype=np.int64))


def rasterize(field: GaussianField, cam: Camera, background=(0.0, 0.0, 0.0),
              settings: RenderSettings | None = None) -> RenderOutput:
    settings = settings or RenderSettings()
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    h, w = cam.height, cam.width
    proj = project(field, cam)
    tile_ranges, ids, tiles_x = _bin_tiles(proj, w, h)
    color, alpha, dist, normal, zdepth, distortion, count = _empty_maps(h, w)
    last = np.zeros((h, w), dtype=np.int64)
    final_T = np.ones((h, w))
    clamped = np.zeros((h, w), dtype=np.bool_)
    _forward_kernel(tile_ranges, ids, proj.mean2d, proj.conic, proj.opacity,
                    skip_cutoff(proj.opacity, proj.beta), proj.color, proj.n_cam,
                    proj.d, proj.beta, w, h, tiles_x, cam.fx, cam.fy, cam.cx, cam.cy, bg,
                    settings.weight_mode, *settings.depth_map, color, alpha, dist, normal, zdepth, distortion, count,
                    last, final_T, clamped)
    diag = {"rejected_splats": proj.rejected, "clamped_pixels": int(clamped.sum()),
            "visible_splats": int(proj.valid.sum()), "tile_pairs": int(len(ids))}
    return RenderOutput(color, alpha, dist, normal, zdepth, distortion, count, final_T, last, proj,
                        tile_ranges, ids, bg, settings, diag)


def rasterize_bruteforce(field: GaussianField, cam: Camera, background=(0.0, 0.0, 0.0),
                         settings: RenderSettings | None = None, chunk: int = 64) -> RenderOutput:
    """Dense reference renderer: every splat against every pixel, one global sort.

    Compositing is written as cumulative products over the global order, with
    the same skip and termination rules as the tiled path expressed as masks.
    """
    settings = settings or RenderSettings()
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    h, w = cam.height, cam.width
    proj = project(field, cam)
    color, alpha, dist, normal, zdepth, distortion, count = _empty_maps(h, w)
    idx = np.flatnonzero(proj.valid)
    idx = idx[np.lexsort((idx, proj.depth[idx]))]
    u, v = cam.pixel_grid()
    u, v = u.reshape(-1), v.reshape(-1)
    rays = cam.ray_grid().reshape(-1, 3)
    flat = [m.reshape(h * w, *m.shape[2:]) for m in (color, alpha, dist, normal, zdepth, distortion, count)]
    beta = proj.beta
    mean = proj.mean2d[idx]
    con = proj.conic[idx]
    op = proj.opacity[idx]
    col = proj.color[idx]
    nrm = proj.n_cam[idx]
    dpl = proj.d[idx]
    for s0 in range(0, h * w, chunk):
        sl = slice(s0, min(s0 + chunk, h * w))
        dx = u[sl, None] - mean[None, :, 0]
        dy = v[sl, None] - mean[None, :, 1]
        m2 = con[:, 0] * dx * dx + 2 * con[:, 1] * dx * dy + con[:, 2] * dy * dy
        a = np.minimum(op * np.exp(-np.power(0.5 * np.maximum(m2, 0.0), 0.5 * beta)), ALPHA_MAX)
        a = np.where(a < ALPHA_MIN, 0.0, a)
        inclusive = np.cumprod(1.0 - a, axis=1)
        a = np.where(inclusive < T_MIN, 0.0, a)
        T_after = np.cumprod(1.0 - a, axis=1)
        T_before = np.concatenate([np.ones((a.shape[0], 1)), T_after[:, :-1]], axis=1)
        wgt = a * T_before
        T_final = T_after[:, -1] if a.shape[1] else np.ones(a.shape[0])
        flat[0][sl] = wgt @ col + T_final[:, None] * bg
        flat[1][sl] = 1.0 - T_final
        flat[2][sl] = wgt @ dpl
        flat[3][sl] = wgt @ nrm
        den = np.maximum(np.einsum("pk,pk->p", flat[3][sl], rays[sl]), DEN_MIN)
        flat[4][sl] = flat[2][sl] / den
        zi = dpl[None, :] / np.maximum(rays[sl] @ nrm.T, DEN_MIN)
        zscale, znear = settings.depth_map
        if znear > 0:
            zi = zscale * (1.0 - znear / zi)
        pw = wgt if settings.weight_mode == 0 else a
        pair = pw[:, :, None] * pw[:, None, :] * np.abs(zi[:, :, None] - zi[:, None, :])
        flat[5][sl] = 0.5 * pair.sum(axis=(1, 2))
        flat[6][sl] = np.count_nonzero(a, axis=1)
    return RenderOutput(color, alpha, dist, normal, zdepth, distortion, count, proj=proj,
                        background=bg, settings=settings)


@njit(parallel=True, cache=True)
def _backward_kernel(tile_ranges, ids, n_last, final_T, mean2d, conic, opacity, m2cut, color, n_cam, dplane,
                     beta, width, height, tiles_x, fx, fy, cx, cy, bg, weight_mode, zscale, znear,
                     out_dist, out_normal,
                     g_color, g_alpha, g_dist, g_normal, g_z, g_distortion,
                     e_mean2d, e_conic, e_op, e_color, e_n, e_d, e_beta):
    ntiles = tile_ranges.shape[0]
    for t in prange(ntiles):
        start = tile_ranges[t, 0]
        end = tile_ranges[t, 1]
        tx = t % tiles_x
        ty = t // tiles_x
        cap = max(end - start, 1)
        jb = np.empty(cap, dtype=np.int64)
        ab = np.empty(cap)
        Tb = np.empty(cap)
        wb = np.empty(cap)
        zb = np.empty(cap)
        slb = np.empty(cap)
        denb = np.empty(cap)
        m2b = np.empty(cap)
        gb = np.empty(cap)
        Eb = np.empty(cap)
        Sb = np.empty(cap)
        clampb = np.empty(cap, dtype=np.bool_)
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                u = px + 0.5
                v = py + 0.5
                rx = (u - cx) / fx
                ry = (v - cy) / fy
                # replay the forward pass to collect contributors
                T = 1.0
                k = 0
                for j in range(start, n_last[py, px]):
                    g = ids[j]
                    dx = u - mean2d[g, 0]
                    dy = v - mean2d[g, 1]
                    m2 = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if m2 > m2cut[g]:
                        continue
                    a = opacity[g] * solid_weight(m2, beta)
                    clamped = False
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                        clamped = True
                    if a < ALPHA_MIN:
                        continue
                    den_g = n_cam[g, 0] * rx + n_cam[g, 1] * ry + n_cam[g, 2]
                    if den_g < DEN_MIN:
                        denb[k] = -1.0
                        zraw = dplane[g] / DEN_MIN
                    else:
                        denb[k] = den_g
                        zraw = dplane[g] / den_g
                    zb[k] = _remap_depth(zraw, zscale, znear)
                    slb[k] = _remap_slope(zraw, zscale, znear)
                    jb[k] = j
                    ab[k] = a
                    Tb[k] = T
                    wb[k] = a * T
                    m2b[k] = m2
                    clampb[k] = clamped
                    T = T * (1.0 - a)
                    k += 1
                if k == 0:
                    continue
                dCr = g_color[py, px, 0]
                dCg = g_color[py, px, 1]
                dCb = g_color[py, px, 2]
                dA = g_alpha[py, px]
                dD = g_dist[py, px]
                dNx = g_normal[py, px, 0]
                dNy = g_normal[py, px, 1]
                dNz = g_normal[py, px, 2]
                dZ = g_z[py, px]
                dDist = g_distortion[py, px]
                Dval = out_dist[py, px]
                den = out_normal[py, px, 0] * rx + out_normal[py, px, 1] * ry + out_normal[py, px, 2]
                if den < DEN_MIN:
                    dD += dZ / DEN_MIN
                else:
                    dD += dZ / den
                    f = dZ * Dval / (den * den)
                    dNx -= f * rx
                    dNy -= f * ry
                    dNz -= f
                # distortion partials: E = d/dweight, S = d/dz (before the weight factor)
                if dDist != 0.0 and k > 1:
                    Wtot = 0.0
                    Stot = 0.0
                    for i in range(k):
                        pw = wb[i] if weight_mode == 0 else ab[i]
                        Wtot += pw
                        Stot += pw * zb[i]
                    order = np.argsort(zb[:k])
                    wbel = 0.0
                    sbel = 0.0
                    for r in range(k):
                        i = order[r]
                        pw = wb[i] if weight_mode == 0 else ab[i]
                        wab = Wtot - wbel - pw
                        sab = Stot - sbel - pw * zb[i]
                        Eb[i] = zb[i] * wbel - sbel + sab - zb[i] * wab
                        Sb[i] = pw * (wbel - wab)
                        wbel += pw
                        sbel += pw * zb[i]
                else:
                    for i in range(k):
                        Eb[i] = 0.0
                        Sb[i] = 0.0
                for i in range(k):
                    g = ids[jb[i]]
                    gi = (dCr * color[g, 0] + dCg * color[g, 1] + dCb * color[g, 2] + dA
                          + dNx * n_cam[g, 0] + dNy * n_cam[g, 1] + dNz * n_cam[g, 2] + dD * dplane[g])
                    if weight_mode == 0:
                        gi += dDist * Eb[i]
                    gb[i] = gi
                suffix = final_T[py, px] * (dCr * bg[0] + dCg * bg[1] + dCb * bg[2])
                for i in range(k - 1, -1, -1):
                    j = jb[i]
                    g = ids[j]
                    a = ab[i]
                    w = wb[i]
                    d_a = Tb[i] * gb[i] - suffix / (1.0 - a)
                    if weight_mode == 1:
                        d_a += dDist * Eb[i]
                    suffix += w * gb[i]
                    e_color[j, 0] += w * dCr
                    e_color[j, 1] += w * dCg
                    e_color[j, 2] += w * dCb
                    dz = dDist * Sb[i] * slb[i]
                    dd = w * dD
                    dnx = w * dNx
                    dny = w * dNy
                    dnz = w * dNz
                    if denb[i] > 0.0:
                        dd += dz / denb[i]
                        f = dz * dplane[g] / (denb[i] * denb[i])
                        dnx -= f * rx
                        dny -= f * ry
                        dnz -= f
                    else:
                        dd += dz / DEN_MIN
                    e_d[j] += dd
                    e_n[j, 0] += dnx
                    e_n[j, 1] += dny
                    e_n[j, 2] += dnz
                    if clampb[i]:
                        continue
                    wk, dwm2, dwb = solid_eval(m2b[i], beta)
                    e_op[j] += d_a * wk
                    dw = d_a * opacity[g]
                    dm2 = dw * dwm2
                    e_beta[j] += dw * dwb
                    dx = u - mean2d[g, 0]
                    dy = v - mean2d[g, 1]
                    e_conic[j, 0] += dm2 * dx * dx
                    e_conic[j, 1] += dm2 * 2.0 * dx * dy
                    e_conic[j, 2] += dm2 * dy * dy
                    e_mean2d[j, 0] -= dm2 * 2.0 * (conic[g, 0] * dx + conic[g, 1] * dy)
                    e_mean2d[j, 1] -= dm2 * 2.0 * (conic[g, 1] * dx + conic[g, 2] * dy)


class NonFiniteGradientError(FloatingPointError):
    pass


def _upstream(d_out: dict, h: int, w: int) -> dict:
    shapes = {"color": (h, w, 3), "alpha": (h, w), "dist": (h, w), "normal": (h, w, 3),
              "zdepth": (h, w), "distortion": (h, w)}
    grads = {}
    for name, shape in shapes.items():
        g = d_out.get(name)
        g = np.zeros(shape) if g is None else np.ascontiguousarray(g, dtype=np.float64).reshape(shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite upstream gradient on the {name} map")
        grads[name] = g
    unknown = set(d_out) - set(shapes)
    if unknown:
        raise KeyError(f"unknown render maps: {sorted(unknown)}")
    return grads


def backward(field: GaussianField, cam: Camera, out: RenderOutput, d_out: dict) -> GradientBuffer:
    """Gradients of ``sum(d_out[m] * out.m)`` with respect to every field parameter."""
    h, w = cam.height, cam.width
    up = _upstream(d_out, h, w)
    n = field.count
    buf = GradientBuffer.zeros(n)
    if out.ids is None:
        raise ValueError("backward needs the output of rasterize(), not the brute-force renderer")
    proj = out.proj
    L = len(out.ids)
    e_mean2d = np.zeros((L, 2))
    e_conic = np.zeros((L, 3))
    e_op = np.zeros(L)
    e_color = np.zeros((L, 3))
    e_n = np.zeros((L, 3))
    e_d = np.zeros(L)
    e_beta = np.zeros(L)
    tiles_x = (w + TILE - 1) // TILE
    _backward_kernel(out.tile_ranges, out.ids, out.n_last, out.final_T, proj.mean2d, proj.conic,
                     proj.opacity, skip_cutoff(proj.opacity, proj.beta), proj.color, proj.n_cam,
                     proj.d, proj.beta, w, h, tiles_x,
                     cam.fx, cam.fy, cam.cx, cam.cy, out.background, out.settings.weight_mode,
                     *out.settings.depth_map,
                     out.dist, out.normal, up["color"], up["alpha"], up["dist"], up["normal"],
                     up["zdepth"], up["distortion"],
                     e_mean2d, e_conic, e_op, e_color, e_n, e_d, e_beta)

    # fixed-order reduction of per-entry partials onto Gaussians
    def reduce(e):
        if e.ndim == 1:
            return np.bincount(out.ids, weights=e, minlength=n)
        return np.stack([np.bincount(out.ids, weights=e[:, k], minlength=n) for k in range(e.shape[1])], 1)

    d_mean2d = reduce(e_mean2d)
    grads = project_backward(field, cam, proj, d_mean2d, reduce(e_conic), reduce(e_op),
                             reduce(e_color), reduce(e_n), reduce(e_d))
    d_beta = float(np.sum(e_beta))
    buf.mu, buf.q, buf.s, buf.rho, buf.c = grads["mu"], grads["q"], grads["s"], grads["rho"], grads["c"]
    buf.beta_raw = d_beta * float(sigmoid(field.beta_raw))
    buf.mean2d = d_mean2d
    for name, g in buf.as_dict().items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient on {name}")
    return buf


def depth_to_normal(zdepth: np.ndarray, cam: Camera, mask: np.ndarray | None = None) -> np.ndarray:
    """Camera-facing unit normals from central differences of the back-projected depth.

    Border pixels and pixels whose 4-neighborhood leaves ``mask`` get a zero normal.
    """
    n, _, _ = _depth_normal_parts(zdepth, cam, mask)
    return n


def _depth_normal_parts(zdepth, cam, mask):
    zdepth = np.asarray(zdepth, dtype=np.float64)
    h, w = zdepth.shape
    P = cam.ray_grid() * zdepth[..., None]
    ddx = np.zeros((h, w, 3))
    ddy = np.zeros((h, w, 3))
    ddx[1:-1, 1:-1] = P[1:-1, 2:] - P[1:-1, :-2]
    ddy[1:-1, 1:-1] = P[2:, 1:-1] - P[:-2, 1:-1]
    c = np.cross(ddy, ddx)
    norm = np.linalg.norm(c, axis=-1)
    valid = np.zeros((h, w), dtype=bool)
    valid[1:-1, 1:-1] = True
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        inner = np.zeros((h, w), dtype=bool)
        inner[1:-1, 1:-1] = m[1:-1, 1:-1] & m[1:-1, 2:] & m[1:-1, :-2] & m[2:, 1:-1] & m[:-2, 1:-1]
        valid &= inner
    valid &= norm > 1e-20
    n = np.where(valid[..., None], c / np.where(norm > 0, norm, 1.0)[..., None], 0.0)
    return n, (ddx, ddy, c, norm), valid


def depth_to_normal_backward(zdepth: np.ndarray, cam: Camera, mask, d_normal: np.ndarray) -> np.ndarray:
    """Gradient on ``zdepth`` given a gradient on ``depth_to_normal(zdepth, cam, mask)``."""
    n, (ddx, ddy, c, norm), valid = _depth_normal_parts(zdepth, cam, mask)
    h, w = n.shape[:2]
    g = np.where(valid[..., None], d_normal, 0.0)
    safe = np.where(valid, norm, 1.0)[..., None]
    dc = (g - n * np.sum(n * g, axis=-1, keepdims=True)) / safe
    d_ddy = np.cross(ddx, dc)
    d_ddx = np.cross(dc, ddy)
    dP = np.zeros((h, w, 3))
    dP[1:-1, 2:] += d_ddx[1:-1, 1:-1]
    dP[1:-1, :-2] -= d_ddx[1:-1, 1:-1]
    dP[2:, 1:-1] += d_ddy[1:-1, 1:-1]
    dP[:-2, 1:-1] -= d_ddy[1:-1, 1:-1]
    return np.sum(dP * cam.ray_grid(), axis=-1)
