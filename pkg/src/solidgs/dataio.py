"""Scene bundles on disk, image/normal formats, and ray-traced synthetic scenes.

Bundle layout::

    scene.json              metadata (background color, shape, scene radius, ...)
    cameras.jsonl           one camera record per line
    images/NNN.png          8-bit RGB training images
    normals/NNN.pfm         camera-frame prior normals (3-channel float)
    normals/NNN_mask.png    prior validity mask
    points.ply              initial point cloud (x, y, z and optional red, green, blue)
    gt_mesh.ply             optional ground-truth mesh
    gt_points.ply           optional reference points for Chamfer evaluation
    holdout/cameras.jsonl   optional held-out views for PSNR
    holdout/images/NNN.png
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import ply
from .geometry import Camera, look_at, load_cameras, save_cameras
from .losses import PriorMaps


class BundleError(ValueError):
    pass


# ----------------------------------------------------------------------------
# image formats


def write_png(path, img) -> None:
    """Write a float image in [0, 1] (H, W) or (H, W, 3) as 8-bit PNG."""
    a = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a).save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im)
    if a.ndim == 3 and a.shape[2] == 4:
        a = a[..., :3]
    return a.astype(np.float64) / 255.0


def write_mask_png(path, mask) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_pfm(path, data) -> None:
    """Little-endian PFM, rows stored bottom-to-top as the format requires."""
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError("PFM holds (H, W) or (H, W, 3) arrays")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise BundleError(f"{path}: not a PFM file")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        dt = "<f4" if scale < 0 else ">f4"
        ch = 3 if tag == b"PF" else 1
        a = np.frombuffer(f.read(), dtype=dt, count=w * h * ch)
    a = a.reshape(h, w, ch)[::-1].astype(np.float32)
    return a[..., 0] if ch == 1 else a


def normal_to_rgb(n) -> np.ndarray:
    return (np.asarray(n) + 1.0) * 0.5


def save_render_maps(out, directory, prefix: str) -> None:
    """Color and normal previews as PNG; depth, alpha, distortion as PFM."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_png(d / f"{prefix}_color.png", out.color)
    unit = out.normal / np.maximum(np.linalg.norm(out.normal, axis=-1, keepdims=True), 1e-12)
    write_png(d / f"{prefix}_normal.png", normal_to_rgb(-unit))
    write_pfm(d / f"{prefix}_zdepth.pfm", out.zdepth)
    write_pfm(d / f"{prefix}_alpha.pfm", out.alpha)
    write_pfm(d / f"{prefix}_distortion.pfm", out.distortion)


# ----------------------------------------------------------------------------
# bundles


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh has non-finite vertices")

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0


def save_mesh(path, mesh: TriangleMesh) -> None:
    v = mesh.vertices
    ply.write_ply(path, {"x": v[:, 0].astype("<f8"), "y": v[:, 1].astype("<f8"), "z": v[:, 2].astype("<f8")},
                  faces=mesh.triangles)


def load_mesh(path) -> TriangleMesh:
    vertex, faces, _ = ply.read_ply(path)
    v = np.stack([vertex["x"], vertex["y"], vertex["z"]], 1).astype(np.float64)
    return TriangleMesh(v, np.zeros((0, 3), dtype=np.int64) if faces is None else faces)


def save_points(path, points, colors=None) -> None:
    p = np.asarray(points, dtype=np.float64)
    vertex = {"x": p[:, 0].astype("<f8"), "y": p[:, 1].astype("<f8"), "z": p[:, 2].astype("<f8")}
    if colors is not None:
        c = np.asarray(colors, dtype=np.float64)
        vertex.update(red=c[:, 0].astype("<f8"), green=c[:, 1].astype("<f8"), blue=c[:, 2].astype("<f8"))
    ply.write_ply(path, vertex)


def load_points(path):
    vertex, _, _ = ply.read_ply(path)
    try:
        p = np.stack([vertex["x"], vertex["y"], vertex["z"]], 1).astype(np.float64)
    except KeyError:
        raise BundleError(f"{path}: point cloud lacks x/y/z") from None
    colors = None
    if all(k in vertex for k in ("red", "green", "blue")):
        c = np.stack([vertex["red"], vertex["green"], vertex["blue"]], 1)
        colors = c.astype(np.float64) / (255.0 if c.dtype == np.uint8 else 1.0)
    return p, colors


@dataclass
class SceneBundle:
    cameras: list
    images: list
    priors: list = field(default_factory=list)
    init_points: np.ndarray | None = None
    init_colors: np.ndarray | None = None
    gt_mesh: TriangleMesh | None = None
    gt_points: np.ndarray | None = None
    holdout_cameras: list = field(default_factory=list)
    holdout_images: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def background(self) -> np.ndarray:
        return np.asarray(self.meta.get("background", [0.0, 0.0, 0.0]), dtype=np.float64)

    def validate(self) -> None:
        if len(self.cameras) != len(self.images):
            raise BundleError(f"{len(self.cameras)} cameras but {len(self.images)} images")
        if self.priors and len(self.priors) != len(self.cameras):
            raise BundleError(f"{len(self.priors)} prior maps for {len(self.cameras)} views")
        for k, (cam, img) in enumerate(zip(self.cameras, self.images)):
            if img.shape[:2] != (cam.height, cam.width):
                raise BundleError(f"view {k}: image is {img.shape[1]}x{img.shape[0]}, "
                                  f"camera expects {cam.width}x{cam.height}")
        for k, (cam, pr) in enumerate(zip(self.cameras, self.priors)):
            if pr is not None and pr.normal_prior.shape[:2] != (cam.height, cam.width):
                raise BundleError(f"view {k}: prior normal map size does not match its camera")
        if len(self.holdout_cameras) != len(self.holdout_images):
            raise BundleError("holdout cameras and images differ in count")
        for k, (cam, img) in enumerate(zip(self.holdout_cameras, self.holdout_images)):
            if img.shape[:2] != (cam.height, cam.width):
                raise BundleError(f"holdout view {k}: image size does not match its camera")

    def subset(self, views) -> "SceneBundle":
        views = list(views)
        return SceneBundle([self.cameras[i] for i in views], [self.images[i] for i in views],
                           [self.priors[i] for i in views] if self.priors else [],
                           self.init_points, self.init_colors, self.gt_mesh, self.gt_points,
                           list(self.holdout_cameras), list(self.holdout_images), dict(self.meta))


def save_bundle(bundle: SceneBundle, directory) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "scene.json").write_text(json.dumps(bundle.meta, indent=2, sort_keys=True) + "\n")
    save_cameras(d / "cameras.jsonl", bundle.cameras)
    for k, img in enumerate(bundle.images):
        write_png(d / "images" / f"{k:03d}.png", img)
    if bundle.priors:
        (d / "normals").mkdir(exist_ok=True)
        for k, pr in enumerate(bundle.priors):
            write_pfm(d / "normals" / f"{k:03d}.pfm", pr.normal_prior)
            write_mask_png(d / "normals" / f"{k:03d}_mask.png", pr.valid_mask)
    if bundle.init_points is not None:
        save_points(d / "points.ply", bundle.init_points, bundle.init_colors)
    if bundle.gt_mesh is not None:
        save_mesh(d / "gt_mesh.ply", bundle.gt_mesh)
    if bundle.gt_points is not None:
        save_points(d / "gt_points.ply", bundle.gt_points)
    if bundle.holdout_cameras:
        (d / "holdout" / "images").mkdir(parents=True, exist_ok=True)
        save_cameras(d / "holdout" / "cameras.jsonl", bundle.holdout_cameras)
        for k, img in enumerate(bundle.holdout_images):
            write_png(d / "holdout" / "images" / f"{k:03d}.png", img)


def _read_images(directory: Path, count: int) -> list:
    files = sorted(directory.glob("*.png"))
    if len(files) != count:
        raise BundleError(f"{directory}: found {len(files)} images for {count} cameras")
    out = []
    for f in files:
        try:
            out.append(read_png(f))
        except OSError as exc:
            raise BundleError(f"{f}: unreadable image ({exc})") from exc
    return out


def load_bundle(directory) -> SceneBundle:
    d = Path(directory)
    if not d.is_dir():
        raise BundleError(f"{d}: bundle directory does not exist")
    cam_file = d / "cameras.jsonl"
    if not cam_file.exists():
        raise BundleError(f"{cam_file}: missing cameras file")
    if not (d / "images").is_dir():
        raise BundleError(f"{d / 'images'}: missing images directory")
    cameras = load_cameras(cam_file)
    images = _read_images(d / "images", len(cameras))
    meta = json.loads((d / "scene.json").read_text()) if (d / "scene.json").exists() else {}
    priors = []
    if (d / "normals").is_dir():
        for k in range(len(cameras)):
            npath = d / "normals" / f"{k:03d}.pfm"
            mpath = d / "normals" / f"{k:03d}_mask.png"
            if not npath.exists():
                raise BundleError(f"{npath}: missing prior normal map")
            normals = read_pfm(npath)
            mask = read_mask_png(mpath) if mpath.exists() else np.ones(normals.shape[:2], dtype=bool)
            try:
                priors.append(PriorMaps(normals, mask))
            except ValueError as exc:
                raise BundleError(f"{npath}: {exc}") from exc
    pts = cols = None
    if (d / "points.ply").exists():
        pts, cols = load_points(d / "points.ply")
    gt_mesh = load_mesh(d / "gt_mesh.ply") if (d / "gt_mesh.ply").exists() else None
    gt_points = load_points(d / "gt_points.ply")[0] if (d / "gt_points.ply").exists() else None
    h_cams, h_imgs = [], []
    if (d / "holdout" / "cameras.jsonl").exists():
        h_cams = load_cameras(d / "holdout" / "cameras.jsonl")
        h_imgs = _read_images(d / "holdout" / "images", len(h_cams))
    return SceneBundle(cameras, images, priors, pts, cols, gt_mesh, gt_points, h_cams, h_imgs, meta)


# ----------------------------------------------------------------------------
# synthetic scenes


class Sphere:
    name = "sphere"

    def __init__(self, radius=1.0):
        self.radius = radius
        self.bounding_radius = radius

    def intersect(self, o, d):
        """Nearest positive hit distance along unit rays (inf on miss) and outward normals."""
        b = d @ o
        c = o @ o - self.radius**2
        disc = b * b - c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        t = np.where(hit, t, np.inf)
        x = o + d * np.where(np.isfinite(t), t, 0.0)[:, None]
        return t, x / self.radius

    def sample(self, n, rng):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * self.radius, v

    def mesh(self, subdivisions=5) -> TriangleMesh:
        verts, faces = _icosphere(subdivisions)
        return TriangleMesh(verts * self.radius, faces)


class Cube:
    name = "cube"

    def __init__(self, half=0.75):
        self.half = half
        self.bounding_radius = half * math.sqrt(3)

    def intersect(self, o, d):
        h = self.half
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-h - o) * inv
            t2 = (h - o) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tnear = np.nanmax(tmin, axis=1)
        tfar = np.nanmin(tmax, axis=1)
        hit = (tnear <= tfar) & (tfar > 1e-9)
        t = np.where(hit, np.where(tnear > 1e-9, tnear, tfar), np.inf)
        x = o + d * np.where(np.isfinite(t), t, 0.0)[:, None]
        k = np.argmax(np.abs(x) / h, axis=1)
        n = np.zeros_like(x)
        n[np.arange(len(x)), k] = np.sign(x[np.arange(len(x)), k])
        return t, n

    def sample(self, n, rng):
        face = rng.integers(0, 6, n)
        uv = rng.uniform(-self.half, self.half, (n, 2))
        axis = face // 2
        sgn = np.where(face % 2 == 0, 1.0, -1.0)
        p = np.zeros((n, 3))
        nrm = np.zeros((n, 3))
        for a in range(3):
            m = axis == a
            others = [b for b in range(3) if b != a]
            p[m, a] = sgn[m] * self.half
            p[np.ix_(m, others)] = uv[m]
            nrm[m, a] = sgn[m]
        return p, nrm

    def mesh(self, res=24) -> TriangleMesh:
        verts, faces = [], []
        g = np.linspace(-self.half, self.half, res + 1)
        uu, vv = np.meshgrid(g, g, indexing="ij")
        base = 0
        for a in range(3):
            others = [b for b in range(3) if b != a]
            for sgn in (1.0, -1.0):
                p = np.zeros(((res + 1) ** 2, 3))
                p[:, a] = sgn * self.half
                p[:, others[0]] = uu.ravel()
                p[:, others[1]] = vv.ravel()
                verts.append(p)
                faces.append(_grid_faces(res, base, flip=(sgn < 0) != (a == 1)))
                base += len(p)
        return TriangleMesh(np.vstack(verts), np.vstack(faces))


class TwoPlanes:
    """Two parallel square panels facing +x, offset in depth and laterally."""

    name = "two-planes"
    panels = ((0.3, (-1.0, 0.2), (-0.8, 0.8)), (-0.5, (-0.2, 1.0), (-0.8, 0.8)))

    def __init__(self):
        self.bounding_radius = 1.3

    def intersect(self, o, d):
        t_best = np.full(len(d), np.inf)
        for x0, (y0, y1), (z0, z1) in self.panels:
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (x0 - o[0]) / d[:, 0]
            p = o + d * np.where(np.isfinite(t), t, 0.0)[:, None]
            ok = (t > 1e-9) & (p[:, 1] >= y0) & (p[:, 1] <= y1) & (p[:, 2] >= z0) & (p[:, 2] <= z1)
            t_best = np.where(ok & (t < t_best), t, t_best)
        n = np.zeros((len(d), 3))
        n[:, 0] = np.where(d[:, 0] < 0, 1.0, -1.0)
        return t_best, n

    def sample(self, n, rng):
        k = rng.integers(0, 2, n)
        p = np.zeros((n, 3))
        for i, (x0, (y0, y1), (z0, z1)) in enumerate(self.panels):
            m = k == i
            p[m, 0] = x0
            p[m, 1] = rng.uniform(y0, y1, m.sum())
            p[m, 2] = rng.uniform(z0, z1, m.sum())
        nrm = np.zeros((n, 3))
        nrm[:, 0] = 1.0
        return p, nrm

    def mesh(self, res=32) -> TriangleMesh:
        verts, faces, base = [], [], 0
        for x0, (y0, y1), (z0, z1) in self.panels:
            yy, zz = np.meshgrid(np.linspace(y0, y1, res + 1), np.linspace(z0, z1, res + 1), indexing="ij")
            p = np.stack([np.full(yy.size, x0), yy.ravel(), zz.ravel()], 1)
            verts.append(p)
            faces.append(_grid_faces(res, base))
            base += len(p)
        return TriangleMesh(np.vstack(verts), np.vstack(faces))


SHAPES = {"sphere": Sphere, "cube": Cube, "two-planes": TwoPlanes}
TEXTURES = ("checker", "noise")


def _grid_faces(res, base, flip=False):
    i, j = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    a = base + i * (res + 1) + j
    b, c, d = a + 1, a + res + 1, a + res + 2
    f = np.concatenate([np.stack([a, c, b], -1).reshape(-1, 3), np.stack([b, c, d], -1).reshape(-1, 3)])
    return f[:, ::-1] if flip else f


def _icosphere(subdivisions):
    t = (1 + 5**0.5) / 2
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    verts = list(v / np.linalg.norm(v, axis=1, keepdims=True))
    for _ in range(subdivisions):
        cache = {}
        nf = []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = np.array(nf)
    return np.array(verts), f


CHECKER_COLORS = np.array([[0.92, 0.86, 0.74], [0.22, 0.34, 0.72]])
LIGHT_DIR = np.array([0.45, -0.35, 0.82]) / np.linalg.norm([0.45, -0.35, 0.82])


def _albedo(x, texture, lattice):
    if texture == "checker":
        cell = 0.4
        parity = np.floor(x / cell).astype(np.int64).sum(axis=1) % 2
        return CHECKER_COLORS[parity]
    # trilinear value noise on a seeded lattice
    freq = 2.5
    g = (x + 2.0) * freq
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    f = f * f * (3 - 2 * f)
    out = np.zeros((len(x), 3))
    n = lattice.shape[0]
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1])
                     * (f[:, 2] if dz else 1 - f[:, 2]))
                idx = (i0 + np.array([dx, dy, dz])) % n
                out += w[:, None] * lattice[idx[:, 0], idx[:, 1], idx[:, 2]]
    return out


def shade(x, n, texture, lattice):
    """Lambertian radiance under a fixed world light (view independent)."""
    return _albedo(x, texture, lattice) * (0.4 + 0.6 * np.clip(n @ LIGHT_DIR, 0.0, None))[:, None]


def ray_trace(shape, cam: Camera, texture, lattice, background, supersample=3):
    """Reference renderer: ``supersample^2`` rays per pixel, box-filtered."""
    h, w = cam.height, cam.width
    o = cam.center
    acc = np.zeros((h * w, 3))
    offs = (np.arange(supersample) + 0.5) / supersample
    j, i = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for oy in offs:
        for ox in offs:
            u = (i + ox).ravel()
            v = (j + oy).ravel()
            d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], 1)
            d = d_cam @ cam.R
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            t, n = shape.intersect(o, d)
            hit = np.isfinite(t)
            col = np.broadcast_to(np.asarray(background, float), (len(t), 3)).copy()
            x = o + d[hit] * t[hit, None]
            col[hit] = shade(x, n[hit], texture, lattice)
            acc += col
    return (acc / supersample**2).reshape(h, w, 3)


def center_hits(shape, cam: Camera):
    """Hit points, world normals and z-depths of the pixel-center rays."""
    rays = cam.ray_grid().reshape(-1, 3)
    d = rays @ cam.R
    dn = d / np.linalg.norm(d, axis=1, keepdims=True)
    t, n = shape.intersect(cam.center, dn)
    hit = np.isfinite(t)
    x = cam.center + dn * np.where(hit, t, 0.0)[:, None]
    z = np.where(hit, (x - cam.center) @ cam.R[2], 0.0)
    return hit.reshape(cam.height, cam.width), x.reshape(cam.height, cam.width, 3), \
        n.reshape(cam.height, cam.width, 3), z.reshape(cam.height, cam.width)


def sample_vmf(mu, kappa, rng):
    """von Mises-Fisher samples on S^2 around unit vectors ``mu`` (N, 3)."""
    n = len(mu)
    u = rng.uniform(size=n)
    w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    phi = rng.uniform(0, 2 * np.pi, n)
    r = np.sqrt(np.clip(1.0 - w * w, 0.0, None))
    helper = np.where(np.abs(mu[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    e1 = np.cross(mu, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(mu, e1)
    v = w[:, None] * mu + r[:, None] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def ring_cameras(count, resolution, offset_deg=0.0, spacing_deg=30.0, distance=3.5,
                 elevation_deg=20.0, fov_deg=45.0, prefix="view"):
    """Cameras on a ring around the origin (world up is +z), centered on azimuth 0."""
    f = 0.5 * resolution / math.tan(math.radians(fov_deg) / 2)
    cams = []
    el = math.radians(elevation_deg)
    for k in range(count):
        az = math.radians((k - (count - 1) / 2) * spacing_deg + offset_deg)
        eye = distance * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(look_at(eye, np.zeros(3), [0, 0, 1], f, f, resolution / 2, resolution / 2,
                            resolution, resolution, f"{prefix}{k:03d}"))
    return cams


def _visible(shape, cams, pts, tol=1e-4):
    vis = np.zeros(len(pts), dtype=bool)
    for cam in cams:
        pc = pts @ cam.R.T + cam.t
        z = pc[:, 2]
        front = z > 1e-6
        u = cam.fx * pc[:, 0] / np.where(front, z, 1) + cam.cx
        v = cam.fy * pc[:, 1] / np.where(front, z, 1) + cam.cy
        inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        d = pts - cam.center
        dist = np.linalg.norm(d, axis=1)
        t, _ = shape.intersect(cam.center, d / dist[:, None])
        vis |= inside & (t >= dist - tol)
    return vis


def generate_synthetic(shape: str = "sphere", texture: str = "checker", n_train: int = 3,
                       n_holdout: int = 2, resolution: int = 128, kappa: float = math.inf,
                       seed: int = 0, n_points: int = 6000, point_noise: float = 0.01,
                       background=(0.0, 0.0, 0.0), supersample: int = 3,
                       reference_views: int | None = None) -> SceneBundle:
    """Ray-traced scene with analytic ground truth.

    ``reference_views`` sets how many ring views the Chamfer reference points
    are fused from (defaults to ``n_train``); view-count studies fuse them from
    the largest setting so every run is scored against the same scan.
    """
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}; choose from {', '.join(SHAPES)}")
    if texture not in TEXTURES:
        raise ValueError(f"unknown texture {texture!r}; choose from {', '.join(TEXTURES)}")
    if n_train < 2:
        raise ValueError("a synthetic scene needs at least two training views")
    rng = np.random.default_rng(seed)
    geom = SHAPES[shape]()
    lattice = rng.uniform(0.1, 0.95, (8, 8, 8, 3))
    cams = ring_cameras(n_train, resolution)
    images, priors = [], []
    for cam in cams:
        img = ray_trace(geom, cam, texture, lattice, background, supersample)
        images.append(np.round(img * 255.0) / 255.0)
        hit, _, n_world, _ = center_hits(geom, cam)
        n_cam = n_world @ cam.R.T
        if math.isfinite(kappa):
            flat = n_cam.reshape(-1, 3)
            flat[hit.ravel()] = sample_vmf(flat[hit.ravel()], kappa, rng)
            n_cam = flat.reshape(n_cam.shape)
        n_cam = np.where(hit[..., None], n_cam, 0.0).astype(np.float32)
        priors.append(PriorMaps(n_cam, hit))

    pts, nrm = geom.sample(4 * n_points, rng)
    vis = _visible(geom, cams, pts)
    pts, nrm = pts[vis][:n_points], nrm[vis][:n_points]
    colors = shade(pts, nrm, texture, lattice)
    sigma = point_noise * geom.bounding_radius
    noisy = pts + rng.uniform(-sigma, sigma, pts.shape)

    ref_cams = cams if reference_views is None else ring_cameras(reference_views, resolution)
    gt_pts = []
    for cam in ring_cameras(len(ref_cams), 2 * resolution):
        hit, x, _, _ = center_hits(geom, cam)
        gt_pts.append(x[hit])
    gt_points = np.vstack(gt_pts)

    offsets = [15.0 * (1 if k % 2 == 0 else -1) * (1 + k // 2) for k in range(n_holdout)]
    h_cams = [replace(ring_cameras(1, resolution, offset_deg=o)[0], name=f"holdout{k:03d}")
              for k, o in enumerate(offsets)]
    h_imgs = [np.round(ray_trace(geom, c, texture, lattice, background, supersample) * 255.0) / 255.0
              for c in h_cams]
    meta = {"shape": shape, "texture": texture, "seed": seed, "kappa": None if math.isinf(kappa) else kappa,
            "background": [float(b) for b in background], "scene_radius": geom.bounding_radius,
            "resolution": resolution, "n_train": n_train, "supersample": supersample,
            "reference_views": len(ref_cams)}
    return SceneBundle(cams, images, priors, noisy, colors, geom.mesh(), gt_points, h_cams, h_imgs, meta)
