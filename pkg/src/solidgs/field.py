"""Gaussian scene representation and its per-camera projection.

Parameters are stored in unconstrained form: log-scales, opacity logits and a
raw solidness value ``beta_raw`` mapped to ``beta = 1 + softplus(beta_raw)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import ply
from .geometry import Camera, InvalidInputError, quat_to_rotation
from .kernel import CULL_EPSILON, effective_radius

BETA_RAW_INIT = math.log(math.e - 1.0)  # beta = 2
LOW_PASS = 0.3  # px^2 added to projected covariances
NEAR_PLANE = 0.01
PLANE_FLOOR = 1e-10  # edge-on splats keep a tiny positive plane distance
BETA_FLOOR = 1e-9  # keeps beta strictly above 1 in floating point

PLY_PROPERTIES = (
    "x", "y", "z", "quat_w", "quat_x", "quat_y", "quat_z",
    "log_scale_0", "log_scale_1", "log_scale_2", "opacity_logit", "r", "g", "b",
)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def beta_of(beta_raw: float) -> float:
    return float(1.0 + max(np.logaddexp(0.0, beta_raw), BETA_FLOOR))


def beta_raw_of(beta: float) -> float:
    if not beta > 1.0 + BETA_FLOOR:
        raise InvalidInputError("beta must exceed 1")
    return float(np.log(np.expm1(beta - 1.0)))


@dataclass
class GaussianField:
    mu: np.ndarray      # (N, 3)
    q: np.ndarray       # (N, 4) quaternions, (w, x, y, z)
    s: np.ndarray       # (N, 3) log-scales
    rho: np.ndarray     # (N,) opacity logits
    c: np.ndarray       # (N, 3) RGB in [0, 1]
    beta_raw: float = BETA_RAW_INIT

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(n, 4)
        self.s = np.asarray(self.s, dtype=np.float64).reshape(n, 3)
        self.rho = np.asarray(self.rho, dtype=np.float64).reshape(n)
        self.c = np.asarray(self.c, dtype=np.float64).reshape(n, 3)
        self.beta_raw = float(self.beta_raw)

    @classmethod
    def empty(cls) -> "GaussianField":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @property
    def count(self) -> int:
        return len(self.mu)

    def __len__(self):
        return self.count

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.s)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.rho)

    @property
    def beta(self) -> float:
        return beta_of(self.beta_raw)

    def copy(self) -> "GaussianField":
        return GaussianField(self.mu.copy(), self.q.copy(), self.s.copy(), self.rho.copy(),
                             self.c.copy(), self.beta_raw)

    def snapshot(self) -> "GaussianField":
        """Read-only copy for rendering while the optimizer mutates the original."""
        snap = self.copy()
        for a in (snap.mu, snap.q, snap.s, snap.rho, snap.c):
            a.flags.writeable = False
        return snap

    def select(self, mask) -> "GaussianField":
        return GaussianField(self.mu[mask], self.q[mask], self.s[mask], self.rho[mask],
                             self.c[mask], self.beta_raw)

    @staticmethod
    def concat(a: "GaussianField", b: "GaussianField") -> "GaussianField":
        return GaussianField(np.vstack([a.mu, b.mu]), np.vstack([a.q, b.q]), np.vstack([a.s, b.s]),
                             np.concatenate([a.rho, b.rho]), np.vstack([a.c, b.c]), a.beta_raw)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in dc_fields(self) if f.name != "beta_raw"}

    def transformed(self, scale: float, offset) -> "GaussianField":
        """Apply ``x -> scale * x + offset`` to positions and extents."""
        return GaussianField(self.mu * scale + np.asarray(offset), self.q.copy(),
                             self.s + math.log(scale), self.rho.copy(), self.c.copy(), self.beta_raw)


def covariance3d(s, q) -> np.ndarray:
    """``R S S^T R^T`` from positive scales ``s`` and quaternion ``q`` (batched)."""
    R = quat_to_rotation(q)
    M = R * np.asarray(s, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def min_scale_axis(s) -> np.ndarray:
    """Index of the smallest scale; ``argmin`` already picks the lowest index on ties."""
    return np.argmin(np.asarray(s), axis=-1)


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities for one camera (the splat cache)."""

    valid: np.ndarray
    p_cam: np.ndarray
    Rq: np.ndarray
    scale: np.ndarray
    axis: np.ndarray
    sign: np.ndarray
    sigma_cam: np.ndarray
    J: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    mean2d: np.ndarray
    n_cam: np.ndarray
    d: np.ndarray
    depth: np.ndarray
    radius: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    beta: float
    rejected: int
    plane_clamped: np.ndarray = None

    def frame(self, i: int) -> dict | None:
        if not self.valid[i]:
            return None
        return {"mean2d": self.mean2d[i], "cov2d": self.cov2d[i], "normal_cam": self.n_cam[i],
                "plane_dist": float(self.d[i]), "view_depth": float(self.depth[i]),
                "radius_px": float(self.radius[i])}


def project(field: GaussianField, cam: Camera, near: float = NEAR_PLANE) -> Projection:
    """Project every Gaussian of ``field`` into ``cam``."""
    # degenerate inputs are rejected below, not warned about
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        return _project(field, cam, near)


def _project(field, cam, near):
    n = field.count
    W = cam.R
    p_cam = field.mu @ W.T + cam.t
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    front = z > near
    zs = np.where(front, z, 1.0)

    Rq = quat_to_rotation(field.q) if n else np.zeros((0, 3, 3))
    scale = field.scales
    M = Rq * scale[:, None, :]
    sigma = M @ np.swapaxes(M, 1, 2)
    sigma_cam = W @ sigma @ W.T

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs**2
    cov2d = J @ sigma_cam @ np.swapaxes(J, 1, 2) + LOW_PASS * np.eye(2)
    A, B, C = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = A * C - B * B
    finite = np.isfinite(cov2d).all(axis=(1, 2)) & (det > 0)
    dets = np.where(finite, det, 1.0)
    conic = np.stack([C / dets, -B / dets, A / dets], axis=1)

    axis = min_scale_axis(field.s) if n else np.zeros(0, dtype=np.int64)
    n_world = Rq[np.arange(n), :, axis]
    n_cam = n_world @ W.T
    d_signed = np.einsum("ij,ij->i", p_cam, n_cam)
    sign = np.where(d_signed < 0, -1.0, 1.0)
    n_cam = n_cam * sign[:, None]
    d_abs = d_signed * sign
    plane_clamped = d_abs < PLANE_FLOOR
    d = np.maximum(d_abs, PLANE_FLOOR)

    beta = field.beta
    r_maha = effective_radius(beta, CULL_EPSILON)
    mid = 0.5 * (A + C)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = r_maha * np.sqrt(np.maximum(lam, 0.0))

    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    valid = front & finite & np.isfinite(d) & np.isfinite(mean2d).all(axis=1)
    rejected = int(np.count_nonzero(front & ~valid))
    return Projection(valid, p_cam, Rq, scale, axis, sign, sigma_cam, J, cov2d, conic, mean2d,
                      n_cam, d, z.copy(), radius, field.opacity, field.c.copy(), beta, rejected,
                      plane_clamped)


def gaussian_normal(field: GaussianField, i: int, cam: Camera):
    """Camera-frame unit normal and plane distance of Gaussian ``i``, or ``None`` if rejected."""
    proj = project(field.select(slice(i, i + 1)), cam)
    if not proj.valid[0]:
        return None
    return proj.n_cam[0], float(proj.d[0])


def project_covariance(field: GaussianField, i: int, cam: Camera):
    """Splat frame of Gaussian ``i`` in ``cam``, or ``None`` when culled."""
    return project(field.select(slice(i, i + 1)), cam).frame(0)


def _drot_dquat(qn, dR):
    """Back-propagate a gradient on rotation matrices to normalized quaternions."""
    w, x, y, z = qn.T
    g = dR.reshape(-1, 9).T
    dw = 2 * (-z * g[1] + y * g[2] + z * g[3] - x * g[5] - y * g[6] + x * g[7])
    dx = 2 * (y * g[1] + z * g[2] + y * g[3] - 2 * x * g[4] - w * g[5] + z * g[6] + w * g[7] - 2 * x * g[8])
    dy = 2 * (-2 * y * g[0] + x * g[1] + w * g[2] + x * g[3] + z * g[5] - w * g[6] + z * g[7] - 2 * y * g[8])
    dz = 2 * (-2 * z * g[0] - w * g[1] + x * g[2] + w * g[3] - 2 * z * g[4] + y * g[5] + x * g[6] + y * g[7])
    return np.stack([dw, dx, dy, dz], axis=1)


def project_backward(field: GaussianField, cam: Camera, proj: Projection, d_mean2d, d_conic,
                     d_opacity, d_color, d_ncam, d_d) -> dict[str, np.ndarray]:
    """Chain screen-space gradients back to the raw field parameters."""
    n = field.count
    W = cam.R
    fx, fy = cam.fx, cam.fy
    x, y = proj.p_cam[:, 0], proj.p_cam[:, 1]
    z = np.where(proj.valid, proj.p_cam[:, 2], 1.0)

    # conic -> 2D covariance
    a, b, c = proj.conic.T
    Q = np.stack([np.stack([a, b], 1), np.stack([b, c], 1)], 1)
    GQ = np.stack([np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], 1),
                   np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], 1)], 1)
    Gcov = -Q @ GQ @ Q

    JT = np.swapaxes(proj.J, 1, 2)
    d_sigma_cam = JT @ Gcov @ proj.J
    dJ = 2.0 * Gcov @ proj.J @ proj.sigma_cam
    d_sigma = W.T @ d_sigma_cam @ W

    M = proj.Rq * proj.scale[:, None, :]
    dM = 2.0 * d_sigma @ M
    dRq = dM * proj.scale[:, None, :]
    d_scale = np.einsum("nij,nij->nj", dM, proj.Rq)

    if proj.plane_clamped is not None:
        d_d = np.where(proj.plane_clamped, 0.0, d_d)
    dp = np.zeros((n, 3))
    dp += d_d[:, None] * proj.n_cam
    dn = d_ncam + d_d[:, None] * proj.p_cam
    d_nworld = (dn @ W) * proj.sign[:, None]
    dRq[np.arange(n), :, proj.axis] += d_nworld

    dp[:, 0] += dJ[:, 0, 2] * (-fx / z**2) + d_mean2d[:, 0] * fx / z
    dp[:, 1] += dJ[:, 1, 2] * (-fy / z**2) + d_mean2d[:, 1] * fy / z
    dp[:, 2] += (dJ[:, 0, 0] * (-fx / z**2) + dJ[:, 0, 2] * (2 * fx * x / z**3)
                 + dJ[:, 1, 1] * (-fy / z**2) + dJ[:, 1, 2] * (2 * fy * y / z**3)
                 - d_mean2d[:, 0] * fx * x / z**2 - d_mean2d[:, 1] * fy * y / z**2)

    qnorm = np.linalg.norm(field.q, axis=1, keepdims=True)
    qn = field.q / qnorm
    dqn = _drot_dquat(qn, dRq)
    dq = (dqn - qn * np.sum(qn * dqn, axis=1, keepdims=True)) / qnorm

    op = proj.opacity
    grads = {
        "mu": dp @ W,
        "q": dq,
        "s": d_scale * proj.scale,
        "rho": d_opacity * op * (1.0 - op),
        "c": np.asarray(d_color, dtype=np.float64).copy(),
    }
    invalid = ~proj.valid
    for g in grads.values():
        g[invalid] = 0.0
    return grads


def save_field(path, field: GaussianField) -> None:
    f = field
    cols = [f.mu[:, 0], f.mu[:, 1], f.mu[:, 2], f.q[:, 0], f.q[:, 1], f.q[:, 2], f.q[:, 3],
            f.s[:, 0], f.s[:, 1], f.s[:, 2], f.rho, f.c[:, 0], f.c[:, 1], f.c[:, 2]]
    vertex = {name: np.ascontiguousarray(col, dtype="<f8") for name, col in zip(PLY_PROPERTIES, cols)}
    ply.write_ply(path, vertex, comments=[f"beta_raw {field.beta_raw!r}"])


def load_field(path) -> GaussianField:
    vertex, _, comments = ply.read_ply(path)
    missing = [p for p in PLY_PROPERTIES if p not in vertex]
    if missing:
        raise ply.PlyError(f"{path}: checkpoint lacks properties {', '.join(missing)}")
    beta_raw = None
    for c in comments:
        tok = c.split()
        if len(tok) == 2 and tok[0] == "beta_raw":
            beta_raw = float(tok[1])
    if beta_raw is None:
        raise ply.PlyError(f"{path}: checkpoint lacks the beta_raw comment")
    v = {k: np.asarray(vertex[k], dtype=np.float64) for k in PLY_PROPERTIES}
    return GaussianField(
        np.stack([v["x"], v["y"], v["z"]], 1),
        np.stack([v["quat_w"], v["quat_x"], v["quat_y"], v["quat_z"]], 1),
        np.stack([v["log_scale_0"], v["log_scale_1"], v["log_scale_2"]], 1),
        v["opacity_logit"],
        np.stack([v["r"], v["g"], v["b"]], 1),
        beta_raw,
    )
