import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from solidgs.field import (BETA_RAW_INIT, LOW_PASS, GaussianField, beta_of, beta_raw_of, covariance3d,
                           gaussian_normal, load_field, project, project_backward, project_covariance,
                           save_field)
from solidgs.geometry import Camera, look_at, quat_to_rotation
from solidgs.ply import PlyError, read_ply, write_ply

from helpers import random_scene


def one(mu, s=(0.5, 0.5, 0.01), q=(1, 0, 0, 0), rho=0.0):
    return GaussianField([mu], [q], [np.log(s)], [rho], [[0.5, 0.5, 0.5]])


CAM = Camera(100.0, 100.0, 50.0, 50.0, 100, 100)


class TestBeta:
    def test_initial_value_is_two(self):
        assert beta_of(BETA_RAW_INIT) == 2.0

    @given(st.floats(-1e4, 700))
    def test_always_above_one(self, b):
        assert beta_of(b) > 1.0

    @given(st.floats(1.01, 50.0))
    def test_inverse(self, beta):
        assert beta_of(beta_raw_of(beta)) == pytest.approx(beta, rel=1e-12)


class TestCovariance:
    def test_axis_aligned(self):
        assert np.allclose(covariance3d([1, 2, 3], [1, 0, 0, 0]), np.diag([1, 4, 9]))

    def test_unit(self):
        assert np.allclose(covariance3d([1, 1, 1], [1, 0, 0, 0]), np.eye(3))

    def test_eigenvalues_are_squared_scales(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            s = rng.uniform(0.01, 3.0, 3)
            q = rng.normal(size=4)
            S = covariance3d(s, q)
            assert np.allclose(S, S.T, atol=1e-14)
            assert np.allclose(np.linalg.eigvalsh(S), np.sort(s**2), atol=1e-9)
            R = quat_to_rotation(q)
            assert np.abs(R @ np.diag(s**2) @ R.T - S).max() < 1e-12


class TestNormals:
    def test_fronto_parallel(self):
        n, d = gaussian_normal(one([0, 0, 5]), 0, CAM)
        assert np.allclose(n, (0, 0, 1)) and d == pytest.approx(5.0)

    def test_behind_camera_rejected(self):
        assert gaussian_normal(one([0, 0, -5]), 0, CAM) is None
        assert project_covariance(one([0, 0, -5]), 0, CAM) is None

    def test_oblique_plane_distance(self):
        # min-scale axis along the viewing direction of (3, 0, 4)
        axis = np.array([3.0, 0.0, 4.0]) / 5.0
        z = np.array([0.0, 0.0, 1.0])
        half = axis + z
        q = np.r_[np.dot(z, half), np.cross(z, half)]
        n, d = gaussian_normal(one([3, 0, 4], q=q), 0, CAM)
        assert d == pytest.approx(5.0, abs=1e-12)
        assert np.allclose(n, axis)

    def test_normal_flipped_away_from_camera(self):
        f = one([0, 0, 5], q=(0, 1, 0, 0))  # 180 degrees about x: min axis points to -z
        n, d = gaussian_normal(f, 0, CAM)
        assert n[2] > 0 and d > 0

    def test_ties_use_lowest_axis(self):
        f = one([1, 0, 5], s=(0.1, 0.1, 0.5))
        n, _ = gaussian_normal(f, 0, CAM)
        assert np.allclose(n, (1, 0, 0))

    def test_edge_on_splat_kept_with_positive_distance(self):
        # isotropic on the optical axis: the tie-broken normal is perpendicular to the ray
        n, d = gaussian_normal(one([0, 0, 5], s=(0.2, 0.2, 0.2)), 0, CAM)
        assert 0 < d <= 1e-9 and np.allclose(np.abs(n), (1, 0, 0))

    def test_random_unit_normals_positive_distance(self):
        f = random_scene(3, 300)
        cam = look_at([0.3, -0.2, -1.0], [0, 0, 4], [0, -1, 0], 80, 80, 40, 40, 80, 80)
        p = project(f, cam)
        assert np.all(p.d[p.valid] > 0)
        assert np.allclose(np.linalg.norm(p.n_cam[p.valid], axis=1), 1.0, atol=1e-9)


class TestProjectCovariance:
    def test_isotropic_on_axis(self):
        sigma, z, f = 0.2, 4.0, 100.0
        fr = project_covariance(one([0, 0, z], s=(sigma,) * 3), 0, CAM)
        expect = (f * sigma / z) ** 2 + LOW_PASS
        assert np.allclose(fr["cov2d"], expect * np.eye(2))
        assert fr["view_depth"] == z and np.allclose(fr["mean2d"], (50, 50))

    def test_flattened_anisotropy(self):
        fr = project_covariance(one([0, 0, 5], s=(0.1, 0.3, 1e-4)), 0, CAM)
        assert np.allclose(np.diag(fr["cov2d"]), [(100 * 0.1 / 5) ** 2 + LOW_PASS, (100 * 0.3 / 5) ** 2 + LOW_PASS])
        assert abs(fr["cov2d"][0, 1]) < 1e-12

    def test_radius_from_largest_eigenvalue(self):
        fr = project_covariance(one([0, 0, 5], s=(0.1, 0.3, 1e-4)), 0, CAM)
        lam = np.linalg.eigvalsh(fr["cov2d"]).max()
        assert fr["radius_px"] == pytest.approx(math.sqrt(2 * math.log(255)) * math.sqrt(lam))

    def test_psd_with_low_pass(self):
        p = project(random_scene(1, 200), CAM)
        ev = np.linalg.eigvalsh(p.cov2d[p.valid])
        assert np.all(ev >= LOW_PASS - 1e-9)

    def test_non_finite_rejected_and_counted(self):
        f = one([0, 0, 5])
        f.s[0, 0] = np.inf
        p = project(f, CAM)
        assert not p.valid[0] and p.rejected == 1


def test_project_backward_matches_differences():
    rng = np.random.default_rng(0)
    f = random_scene(2, 8)
    cam = Camera(60.0, 60.0, 32.0, 32.0, 64, 64)
    p = project(f, cam)
    w = {k: rng.normal(size=v.shape) for k, v in
         (("mean2d", p.mean2d), ("conic", p.conic), ("op", p.opacity), ("color", p.color),
          ("n", p.n_cam), ("d", p.d))}

    def loss(g):
        q = project(g, cam)
        return (np.sum(w["mean2d"] * q.mean2d) + np.sum(w["conic"] * q.conic) + np.sum(w["op"] * q.opacity)
                + np.sum(w["color"] * q.color) + np.sum(w["n"] * q.n_cam) + np.sum(w["d"] * q.d))

    ana = project_backward(f, cam, p, w["mean2d"], w["conic"], w["op"], w["color"], w["n"], w["d"])
    h = 1e-6
    for name in ("mu", "q", "s", "rho", "c"):
        base = getattr(f, name)
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            a, b = f.copy(), f.copy()
            getattr(a, name)[idx] += h
            getattr(b, name)[idx] -= h
            num[idx] = (loss(a) - loss(b)) / (2 * h)
        assert np.linalg.norm(ana[name] - num) <= 1e-6 * np.linalg.norm(num), name


class TestFieldContainer:
    def test_select_concat(self):
        f = random_scene(0, 10)
        g = GaussianField.concat(f.select(np.arange(10) < 4), f.select(np.arange(10) >= 4))
        assert np.array_equal(g.mu, f.mu) and g.count == 10

    def test_snapshot_is_read_only(self):
        snap = random_scene(0, 3).snapshot()
        with pytest.raises(ValueError):
            snap.mu[0, 0] = 1.0

    def test_transformed_scales_extent(self):
        f = random_scene(0, 5)
        g = f.transformed(2.0, [1, 0, 0])
        assert np.allclose(g.mu, 2 * f.mu + [1, 0, 0]) and np.allclose(g.scales, 2 * f.scales)

    def test_checkpoint_round_trip(self, tmp_path):
        f = random_scene(4, 50)
        f.beta_raw = 1.2345678901234567
        save_field(tmp_path / "g.ply", f)
        g = load_field(tmp_path / "g.ply")
        for name in ("mu", "q", "s", "rho", "c"):
            assert np.array_equal(getattr(f, name), getattr(g, name))
        assert g.beta_raw == f.beta_raw

    def test_checkpoint_missing_property(self, tmp_path):
        write_ply(tmp_path / "bad.ply", {"x": np.zeros(2), "y": np.zeros(2), "z": np.zeros(2)},
                  comments=["beta_raw 0.5"])
        with pytest.raises(PlyError, match="quat_w"):
            load_field(tmp_path / "bad.ply")

    def test_checkpoint_missing_beta(self, tmp_path):
        f = random_scene(0, 2)
        save_field(tmp_path / "g.ply", f)
        v, _, _ = read_ply(tmp_path / "g.ply")
        write_ply(tmp_path / "h.ply", v)
        with pytest.raises(PlyError, match="beta_raw"):
            load_field(tmp_path / "h.ply")


class TestPly:
    def test_ascii_read(self, tmp_path):
        text = ("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                "property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
                "0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
        (tmp_path / "a.ply").write_text(text)
        v, faces, _ = read_ply(tmp_path / "a.ply")
        assert np.allclose(v["x"], [0, 1, 0]) and faces.tolist() == [[0, 1, 2]]

    def test_binary_dtype_preserved(self, tmp_path):
        v = {"x": np.arange(4, dtype="<f4"), "red": np.arange(4, dtype=np.uint8)}
        write_ply(tmp_path / "b.ply", v, faces=[[0, 1, 2], [1, 2, 3]])
        back, faces, _ = read_ply(tmp_path / "b.ply")
        assert back["x"].dtype == np.float32 and back["red"].dtype == np.uint8
        assert faces.tolist() == [[0, 1, 2], [1, 2, 3]]

    def test_not_ply(self, tmp_path):
        (tmp_path / "x.ply").write_bytes(b"hello")
        with pytest.raises(PlyError):
            read_ply(tmp_path / "x.ply")
