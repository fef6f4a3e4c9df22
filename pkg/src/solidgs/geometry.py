"""Pinhole cameras, quaternion rotations and virtual-view synthesis."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.spatial.transform import Rotation

CAMERA_FIELDS = ("fx", "fy", "cx", "cy", "width", "height", "world_to_camera")


class InvalidInputError(ValueError):
    """Raised when an operation receives an input outside its domain."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid world-to-camera pose.

    ``R`` and ``t`` map world points into the camera frame: ``x_cam = R @ x + t``.
    The camera looks down +z, with +x to the right and +y down the image.
    Pixel ``(i, j)`` (column, row) has its center at ``(i + 0.5, j + 0.5)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = ""

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise InvalidInputError("image size must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise InvalidInputError("world_to_camera rotation is not a proper rotation")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, ``-R^T t``."""
        return -self.R.T @ self.t

    def with_pose(self, R, t) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, R, t, self.name)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinates ``(u, v)``, each of shape ``(height, width)``."""
        u = np.arange(self.width, dtype=np.float64) + 0.5
        v = np.arange(self.height, dtype=np.float64) + 0.5
        return np.meshgrid(u, v)

    def ray_grid(self) -> np.ndarray:
        """Unnormalized camera-frame rays ``K^-1 [u, v, 1]`` for every pixel, ``(H, W, 3)``."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def to_dict(self) -> dict:
        pose = np.hstack([self.R, self.t[:, None]])
        d = {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": self.width,
            "height": self.height,
            "world_to_camera": [float(x) for x in pose.reshape(-1)],
        }
        if self.name:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        missing = [k for k in CAMERA_FIELDS if k not in d]
        if missing:
            raise InvalidInputError(f"camera record is missing fields: {', '.join(missing)}")
        pose = np.asarray(d["world_to_camera"], dtype=np.float64)
        if pose.size != 12:
            raise InvalidInputError("world_to_camera must hold 12 values (3x4 row-major)")
        pose = pose.reshape(3, 4)
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), pose[:, :3], pose[:, 3], str(d.get("name", "")),
        )


def look_at(eye, target, up, fx, fy, cx, cy, width, height, name="") -> Camera:
    """Build a camera at ``eye`` looking at ``target`` (image y axis follows ``-up``)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Camera(fx, fy, cx, cy, width, height, R, -R @ eye, name)


def save_cameras(path, cameras: Iterable[Camera]) -> None:
    """Write one JSON record per line."""
    with open(path, "w") as f:
        for cam in cameras:
            f.write(json.dumps(cam.to_dict()) + "\n")


def load_cameras(path) -> list[Camera]:
    cams = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            cams.append(Camera.from_dict(json.loads(line)))
        except (json.JSONDecodeError, InvalidInputError) as exc:
            raise InvalidInputError(f"{path}:{lineno}: {exc}") from exc
    return cams


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix for a ``(w, x, y, z)`` quaternion; batched over leading axes."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm <= 1e-12):
        raise InvalidInputError("quaternion has zero norm")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def homogeneous_ray(cam: Camera, p) -> np.ndarray:
    """``K^-1 [u, v, 1]``; the z component is exactly 1."""
    u, v = p
    return np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])


def project_point(cam: Camera, x_world, near: float = 1e-6):
    """Project a world point to ``((u, v), z_depth)``, or ``None`` when not in front of the camera."""
    X, Y, Z = cam.R @ np.asarray(x_world, dtype=np.float64) + cam.t
    if not Z > near:
        return None
    return np.array([cam.fx * X / Z + cam.cx, cam.fy * Y / Z + cam.cy]), float(Z)


def interpolate_rotation(Ra, Rb, t: float) -> np.ndarray:
    """Geodesic interpolation ``exp(t log(Rb Ra^T)) Ra``."""
    rotvec = Rotation.from_matrix(Rb @ Ra.T).as_rotvec()
    if t == 0.0:
        return Ra.copy()
    return Rotation.from_rotvec(t * rotvec).as_matrix() @ Ra


def rotation_angle(Ra, Rb) -> float:
    """Geodesic distance (radians) between two rotations."""
    return float(np.linalg.norm(Rotation.from_matrix(Rb @ Ra.T).as_rotvec()))


def sample_virtual_view(cam_a: Camera, cam_b: Camera, t: float, noise_scale: float,
                        rng: np.random.Generator) -> Camera:
    """Camera between two training views, with a jittered camera center.

    Rotation is interpolated on SO(3); the center moves linearly and receives
    isotropic Gaussian noise of standard deviation ``noise_scale``. Intrinsics
    come from ``cam_a``.
    """
    if noise_scale < 0:
        raise InvalidInputError("noise_scale must be non-negative")
    if t == 0.0 and noise_scale == 0.0:
        return Camera(cam_a.fx, cam_a.fy, cam_a.cx, cam_a.cy, cam_a.width, cam_a.height,
                      cam_a.R, cam_a.t, "virtual")
    R = interpolate_rotation(cam_a.R, cam_b.R, t)
    center = (1.0 - t) * cam_a.center + t * cam_b.center
    if noise_scale > 0:
        center = center + rng.normal(0.0, noise_scale, size=3)
    if t == 1.0 and noise_scale == 0.0:
        R, tvec = cam_b.R, cam_b.t
    else:
        tvec = -R @ center
    return Camera(cam_a.fx, cam_a.fy, cam_a.cx, cam_a.cy, cam_a.width, cam_a.height, R, tvec, "virtual")
