"""TSDF depth fusion, iso-surface extraction and geometry/image metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .dataio import TriangleMesh
from .losses import ConfigurationError
from .rasterizer import ALPHA_MASK_THRESHOLD, rasterize

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
DEFAULT_VOXEL = 0.008  # for a unit-radius scene
DEFAULT_TRUNC_VOXELS = 4.0
MAX_DIM = 512


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    tsdf_sum: np.ndarray
    weight: np.ndarray

    @property
    def dims(self) -> tuple:
        return self.weight.shape

    @property
    def observed(self) -> np.ndarray:
        return self.weight > 0

    @property
    def tsdf(self) -> np.ndarray:
        """Normalized signed distance in [-1, 1]; unobserved voxels read +1."""
        return np.where(self.weight > 0, self.tsdf_sum / np.maximum(self.weight, 1e-300), 1.0)

    def voxel_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.voxel_size * np.arange(self.dims[axis])

    @classmethod
    def from_sdf(cls, sdf, origin, voxel_size, trunc=None) -> "TsdfVolume":
        """Volume holding a sampled signed-distance grid, every voxel observed once."""
        sdf = np.asarray(sdf, dtype=np.float64)
        tr = trunc if trunc is not None else max(float(np.max(np.abs(sdf))), 1e-12)
        return cls(np.asarray(origin, dtype=np.float64), float(voxel_size),
                   np.clip(sdf / tr, -1.0, 1.0), np.ones(sdf.shape))


@nb.njit(parallel=True, cache=True)
def _fuse_kernel(origin, voxel, dims, depth, valid, Rs, ts, intr, trunc, tsdf_sum, weight):
    nx, ny, nz = dims[0], dims[1], dims[2]
    nviews, h, w = depth.shape
    for i in nb.prange(nx):
        x = origin[0] + voxel * i
        for j in range(ny):
            y = origin[1] + voxel * j
            for k in range(nz):
                z = origin[2] + voxel * k
                acc = 0.0
                cnt = 0.0
                for v in range(nviews):
                    R = Rs[v]
                    pz = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + ts[v, 2]
                    if pz <= 1e-6:
                        continue
                    px = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + ts[v, 0]
                    py = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + ts[v, 1]
                    u = intr[v, 0] * px / pz + intr[v, 2] - 0.5
                    vv = intr[v, 1] * py / pz + intr[v, 3] - 0.5
                    if u < -0.5 or vv < -0.5 or u > w - 0.5 or vv > h - 0.5:
                        continue
                    iu = int(math.floor(u + 0.5))
                    iv = int(math.floor(vv + 0.5))
                    iu = min(max(iu, 0), w - 1)
                    iv = min(max(iv, 0), h - 1)
                    if not valid[v, iv, iu]:
                        continue
                    # bilinear depth over valid taps
                    u0 = int(math.floor(u))
                    v0 = int(math.floor(vv))
                    fu = u - u0
                    fv = vv - v0
                    dsum = 0.0
                    wsum = 0.0
                    for dv in range(2):
                        for du in range(2):
                            uu = u0 + du
                            vq = v0 + dv
                            if uu < 0 or vq < 0 or uu >= w or vq >= h or not valid[v, vq, uu]:
                                continue
                            wt = (fu if du else 1.0 - fu) * (fv if dv else 1.0 - fv)
                            dsum += wt * depth[v, vq, uu]
                            wsum += wt
                    if wsum <= 1e-12:
                        continue
                    sdf = dsum / wsum - pz
                    if sdf < -trunc:
                        continue
                    acc += min(sdf, trunc) / trunc
                    cnt += 1.0
                if cnt > 0:
                    tsdf_sum[i, j, k] += acc
                    weight[i, j, k] += cnt


def fusion_bounds(depths, masks, cams, margin: float):
    """Axis-aligned box around the back-projected masked depth, padded by ``margin``."""
    pts = []
    for d, m, cam in zip(depths, masks, cams):
        rays = cam.ray_grid()[m]
        pc = rays * d[m][:, None]
        pts.append((pc - cam.t) @ cam.R)
    if not pts or sum(len(p) for p in pts) == 0:
        return None
    pts = np.vstack(pts)
    return pts.min(axis=0) - margin, pts.max(axis=0) + margin


def tsdf_fuse(depths, alphas, cams, voxel_size: float, trunc: float, bounds=None,
              alpha_threshold: float = ALPHA_MASK_THRESHOLD) -> TsdfVolume:
    """Average projective truncated SDF over views, weight 1 per observation."""
    if not depths:
        raise ValueError("need at least one depth map")
    if voxel_size <= 0:
        raise ConfigurationError("voxel size must be positive")
    if trunc < voxel_size:
        raise ConfigurationError(f"truncation {trunc} is below the voxel size {voxel_size}")
    if not (len(depths) == len(alphas) == len(cams)):
        raise ValueError("depths, alphas and cameras differ in count")
    masks = [np.asarray(a) > alpha_threshold for a in alphas]
    depths = [np.asarray(d, dtype=np.float64) for d in depths]
    if bounds is None:
        bounds = fusion_bounds(depths, masks, cams, trunc + 2 * voxel_size)
        if bounds is None:
            return TsdfVolume(np.zeros(3), voxel_size, np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(np.int64) + 1, 1)
    if np.any(dims > MAX_DIM):
        raise ConfigurationError(f"volume of {tuple(dims)} voxels exceeds {MAX_DIM} per axis; "
                                 "raise the voxel size")
    shapes = {d.shape for d in depths}
    if len(shapes) != 1:
        raise ValueError("all depth maps must share one resolution")
    tsdf_sum = np.zeros(tuple(dims))
    weight = np.zeros(tuple(dims))
    Rs = np.stack([c.R for c in cams])
    ts = np.stack([c.t for c in cams])
    intr = np.array([[c.fx, c.fy, c.cx, c.cy] for c in cams], dtype=np.float64)
    _fuse_kernel(lo, float(voxel_size), dims, np.stack(depths), np.stack(masks), Rs, ts, intr,
                 float(trunc), tsdf_sum, weight)
    return TsdfVolume(lo, float(voxel_size), tsdf_sum, weight)


def marching_cubes(vol: TsdfVolume, iso: float = 0.0) -> TriangleMesh:
    """Iso-surface over cells whose eight corners are all observed."""
    obs = vol.observed
    if min(vol.dims) < 2 or obs.sum() < 8:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cell = obs.copy()
    cell[:-1, :, :] &= obs[1:, :, :]
    cell[:, :-1, :] &= cell[:, 1:, :]
    cell[:, :, :-1] &= cell[:, :, 1:]
    cell[-1, :, :] = cell[:, -1, :] = cell[:, :, -1] = False
    # skimage indexes a cell by its upper corner
    mc_mask = np.zeros_like(cell)
    mc_mask[1:, 1:, 1:] = cell[:-1, :-1, :-1]
    vals = vol.tsdf
    obs_vals = vals[obs]
    if not (obs_vals.min() < iso < obs_vals.max()) or not cell.any():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    try:
        verts, faces, _, _ = measure.marching_cubes(vals, level=iso, spacing=(vol.voxel_size,) * 3,
                                                    mask=mc_mask, allow_degenerate=False)
    except (ValueError, RuntimeError) as exc:
        log.warning("marching cubes found no surface: %s", exc)
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(verts + vol.origin, faces.astype(np.int64))


def sample_mesh(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the triangles."""
    if mesh.empty:
        raise ValueError("cannot sample an empty mesh")
    a, b, c = (mesh.vertices[mesh.triangles[:, k]] for k in range(3))
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = area.sum()
    if not total > 0:
        raise ValueError("mesh has zero area")
    tri = rng.choice(len(area), size=n, p=area / total)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    return ((1 - r1)[:, None] * a[tri] + (r1 * (1 - r2))[:, None] * b[tri]
            + (r1 * r2)[:, None] * c[tri])


def chamfer_points(samples, reference):
    """(accuracy, completion, chamfer) between two point sets."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if len(samples) == 0 or len(reference) == 0:
        raise ValueError("chamfer distance needs non-empty inputs")
    acc = float(cKDTree(reference).query(samples)[0].mean())
    comp = float(cKDTree(samples).query(reference)[0].mean())
    return acc, comp, 0.5 * (acc + comp)


def chamfer_distance(mesh: TriangleMesh, reference, n_samples: int = 100000, seed: int = 0):
    """Accuracy (mesh to reference), completion (reference to mesh) and their mean."""
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if mesh.empty or len(reference) == 0:
        raise ValueError("chamfer distance needs a non-empty mesh and reference")
    return chamfer_points(sample_mesh(mesh, n_samples, np.random.default_rng(seed)), reference)


def psnr(img, ref) -> float:
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"image shapes differ: {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def render_depths(field, cams, background=(0.0, 0.0, 0.0)):
    outs = [rasterize(field, c, background) for c in cams]
    return [o.zdepth for o in outs], [o.alpha for o in outs]


def mesh_field(field, cams, voxel_size: float, trunc: float | None = None, background=(0.0, 0.0, 0.0)):
    """Render depth from ``cams``, fuse and extract; returns (mesh, volume)."""
    trunc = DEFAULT_TRUNC_VOXELS * voxel_size if trunc is None else trunc
    if trunc < voxel_size:
        raise ConfigurationError(f"truncation {trunc} is below the voxel size {voxel_size}")
    depths, alphas = render_depths(field, cams, background)
    vol = tsdf_fuse(depths, alphas, cams, voxel_size, trunc)
    return marching_cubes(vol), vol
