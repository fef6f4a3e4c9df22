import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from solidgs.dataio import Sphere, TriangleMesh, ring_cameras
from solidgs.geometry import Camera
from solidgs.losses import ConfigurationError
from solidgs.mesher import (TsdfVolume, chamfer_distance, chamfer_points, marching_cubes,
                            mesh_field, psnr, sample_mesh, tsdf_fuse)
from solidgs.trainer import init_from_points


def _plane_view(z=5.0, size=16):
    cam = Camera(20.0, 20.0, size / 2, size / 2, size, size)
    return np.full((size, size), z), np.ones((size, size)), cam


def _sphere_volume(voxel=0.02, radius=1.0, pad=3):
    n = int(math.ceil(2 * (radius + pad * voxel) / voxel)) + 1
    origin = np.full(3, -(n - 1) * voxel / 2)
    ax = origin[0] + voxel * np.arange(n)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    return TsdfVolume.from_sdf(np.sqrt(x**2 + y**2 + z**2) - radius, origin, voxel, trunc=4 * voxel)


def _edge_counts(mesh):
    t = mesh.triangles
    edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    return Counter(map(tuple, edges))


def _signed_volume(mesh):
    a, b, c = (mesh.vertices[mesh.triangles[:, k]] for k in range(3))
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


# -- fusion ----------------------------------------------------------------------


def test_plane_zero_crossing_between_straddling_slabs():
    depth, alpha, cam = _plane_view(5.0)
    voxel = 0.07
    vol = tsdf_fuse([depth], [alpha], [cam], voxel, 4 * voxel, bounds=([-0.3, -0.3, 4.5], [0.3, 0.3, 5.5]))
    zs = vol.voxel_centers(2)
    col = vol.tsdf[vol.dims[0] // 2, vol.dims[1] // 2]
    seen = vol.weight[vol.dims[0] // 2, vol.dims[1] // 2] > 0
    k = np.searchsorted(zs, 5.0)  # zs[k-1] < 5 <= zs[k]
    assert seen[k - 1] and seen[k]
    assert col[k - 1] > 0 > col[k] or col[k] == 0
    assert np.allclose(col[seen], np.clip((5.0 - zs[seen]) / (4 * voxel), -1, 1))


def test_far_behind_surface_is_unobserved():
    depth, alpha, cam = _plane_view(5.0)
    voxel, trunc = 0.05, 0.2
    vol = tsdf_fuse([depth], [alpha], [cam], voxel, trunc, bounds=([-0.2, -0.2, 4.0], [0.2, 0.2, 6.0]))
    zs = vol.voxel_centers(2)
    w = vol.weight[2, 2]
    assert np.all(w[zs > 5.0 + trunc + 1e-9] == 0)
    assert np.all(w[zs < 5.0] == 1)
    assert np.all(np.abs(vol.tsdf) <= 1)


def test_masked_pixels_are_skipped():
    depth, alpha, cam = _plane_view(5.0)
    alpha[:] = 0.4
    vol = tsdf_fuse([depth], [alpha], [cam], 0.05, 0.2, bounds=([-0.2, -0.2, 4.5], [0.2, 0.2, 5.5]))
    assert not vol.observed.any()
    assert np.all(vol.tsdf == 1)


def test_identical_views_match_one_view():
    depth, alpha, cam = _plane_view(5.0)
    b = ([-0.3, -0.3, 4.6], [0.3, 0.3, 5.4])
    one = tsdf_fuse([depth], [alpha], [cam], 0.05, 0.2, bounds=b)
    two = tsdf_fuse([depth, depth], [alpha, alpha], [cam, cam], 0.05, 0.2, bounds=b)
    assert np.array_equal(one.tsdf, two.tsdf)
    assert np.array_equal(2 * one.weight, two.weight)


def _ring_depths(n=4, size=24, seed=0):
    cams = ring_cameras(n, size, spacing_deg=45)
    sph = Sphere()
    rng = np.random.default_rng(seed)
    from solidgs.dataio import center_hits
    depths, alphas = [], []
    for c in cams:
        hit, _, _, z = center_hits(sph, c)
        depths.append(np.where(hit, z + rng.normal(0, 0.01, z.shape), 0.0))
        alphas.append(hit.astype(float))
    return depths, alphas, cams


@settings(max_examples=10, deadline=None)
@given(st.permutations(list(range(4))))
def test_fusion_is_order_independent(perm):
    depths, alphas, cams = _ring_depths()
    b = ([-1.1] * 3, [1.1] * 3)
    ref = tsdf_fuse(depths, alphas, cams, 0.1, 0.3, bounds=b)
    got = tsdf_fuse([depths[i] for i in perm], [alphas[i] for i in perm], [cams[i] for i in perm],
                    0.1, 0.3, bounds=b)
    assert np.array_equal(ref.weight, got.weight)
    assert np.max(np.abs(ref.tsdf - got.tsdf)) <= 1e-12


def test_truncation_below_voxel_is_configuration_error():
    depth, alpha, cam = _plane_view()
    with pytest.raises(ConfigurationError):
        tsdf_fuse([depth], [alpha], [cam], 0.1, 0.05)
    with pytest.raises(ValueError):
        tsdf_fuse([], [], [], 0.1, 0.3)


def test_automatic_bounds_cover_the_surface():
    depths, alphas, cams = _ring_depths()
    vol = tsdf_fuse(depths, alphas, cams, 0.05, 0.2)
    mesh = marching_cubes(vol)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert len(mesh.triangles) > 100
    assert np.median(np.abs(r - 1)) < 0.03


# -- marching cubes --------------------------------------------------------------


def test_sphere_sdf_vertices_on_sphere():
    mesh = marching_cubes(_sphere_volume(0.02))
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.max(np.abs(r - 1)) <= 0.02


def test_sphere_mesh_is_watertight_and_outward():
    mesh = marching_cubes(_sphere_volume(0.1))
    counts = _edge_counts(mesh)
    assert set(counts.values()) == {2}
    assert _signed_volume(mesh) == pytest.approx(4 / 3 * math.pi, rel=0.05)


def test_all_positive_volume_is_empty():
    vol = TsdfVolume.from_sdf(np.ones((5, 5, 5)), np.zeros(3), 0.1)
    assert marching_cubes(vol).empty


def test_unobserved_cells_are_skipped():
    vol = _sphere_volume(0.1)
    vol.weight[: vol.dims[0] // 2] = 0
    mesh = marching_cubes(vol)
    x_min = vol.origin[0] + vol.voxel_size * (vol.dims[0] // 2)
    assert not mesh.empty and mesh.vertices[:, 0].min() >= x_min - 1e-6  # float32 vertices


def test_plane_sdf_gives_planar_mesh():
    n, voxel = 12, 0.1
    origin = np.zeros(3)
    z = origin[2] + voxel * np.arange(n)
    sdf = np.broadcast_to(z - 0.537, (n, n, n)).copy()
    mesh = marching_cubes(TsdfVolume.from_sdf(sdf, origin, voxel))
    assert not mesh.empty
    assert np.max(np.abs(mesh.vertices[:, 2] - 0.537)) <= voxel


# -- metrics ---------------------------------------------------------------------


def test_chamfer_self_is_zero():
    mesh = Sphere().mesh(3)
    pts = sample_mesh(mesh, 2000, np.random.default_rng(7))
    acc, comp, cd = chamfer_points(pts, pts)
    assert acc < 1e-6 and comp < 1e-6 and cd < 1e-6


def test_chamfer_concentric_spheres():
    mesh = Sphere().mesh(5)
    rng = np.random.default_rng(1)
    v = rng.normal(size=(50000, 3))
    ref = 1.1 * v / np.linalg.norm(v, axis=1, keepdims=True)
    acc, comp, cd = chamfer_distance(mesh, ref, n_samples=50000)
    assert acc == pytest.approx(0.1, abs=3e-3)
    assert comp == pytest.approx(0.1, abs=3e-3)
    assert cd == pytest.approx(0.1, abs=3e-3)


def test_outlier_cluster_raises_completion_only():
    mesh = Sphere().mesh(4)
    rng = np.random.default_rng(2)
    ref = sample_mesh(mesh, 20000, rng)
    far = np.array([5.0, 0, 0]) + rng.normal(0, 0.01, (200, 3))
    a1, c1, _ = chamfer_distance(mesh, ref, 20000)
    a2, c2, _ = chamfer_distance(mesh, np.vstack([ref, far]), 20000)
    assert a2 == pytest.approx(a1, abs=1e-12)
    assert c2 > c1 + 0.03


def test_chamfer_swap_exchanges_terms():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(300, 3)), rng.normal(size=(200, 3)) + 0.5
    acc, comp, cd = chamfer_points(a, b)
    acc2, comp2, cd2 = chamfer_points(b, a)
    assert acc == comp2 and comp == acc2 and cd == cd2


def test_chamfer_rejects_empty():
    with pytest.raises(ValueError):
        chamfer_distance(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), np.ones((3, 3)))
    with pytest.raises(ValueError):
        chamfer_points(np.zeros((0, 3)), np.ones((3, 3)))


def test_psnr_values():
    img = np.random.default_rng(0).uniform(0.2, 0.8, (16, 16, 3))
    assert psnr(img, img) == 100.0
    assert psnr(img + 0.1, img) == pytest.approx(20.0, abs=1e-9)
    half = img.copy()
    half[:8] += 0.5
    assert psnr(half, img) == pytest.approx(10 * math.log10(8), abs=1e-9)
    assert psnr(half, img) == pytest.approx(9.03, abs=5e-3)
    with pytest.raises(ValueError):
        psnr(img, img[:8])


def test_mesh_field_on_point_cloud_sphere():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(3000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    field = init_from_points(v)
    # surfels tangent to the sphere: rotate the local z axis onto the radial direction
    q = np.c_[1 + v[:, 2], -v[:, 1], v[:, 0], np.zeros(len(v))]
    field.q[:] = q / np.linalg.norm(q, axis=1, keepdims=True)
    field.s[:, 2] = np.log(1e-3)
    field.rho[:] = 4.0
    cams = ring_cameras(4, 48, spacing_deg=90)
    mesh, vol = mesh_field(field, cams, 0.04)
    assert not mesh.empty
    assert np.median(np.abs(np.linalg.norm(mesh.vertices, axis=1) - 1)) < 0.02
    with pytest.raises(ConfigurationError):
        mesh_field(field, cams, 0.04, trunc=0.02)
