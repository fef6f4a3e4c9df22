import math

import numpy as np
import pytest

from solidgs.dataio import generate_synthetic
from solidgs.field import GaussianField, load_field, logit
from solidgs.losses import ConfigurationError, LossWeights
from solidgs.trainer import (INIT_OPACITY, METRIC_COLUMNS, SPLIT_FACTOR, Adam, DivergenceError,
                             Normalization, TrainConfig, camera_extent, densify_and_prune,
                             init_from_points, position_lr, prune_only, reset_solidness, train)


@pytest.fixture(scope="module")
def tiny_bundle():
    return generate_synthetic("sphere", "checker", n_train=3, n_holdout=1, resolution=32,
                              n_points=400, seed=2)


def _tiny_cfg(iters=40, **kw):
    base = dict(total_iters=iters, densify_from=10, densify_until=30, densify_interval=10,
                geo_reg_start=5, beta_reset_interval=20, beta_reset_until=30,
                virtual_view_interval=5, checkpoint_interval=20, eval_interval=20)
    base.update(kw)
    return TrainConfig(**base)


# -- config ----------------------------------------------------------------------


def test_config_defaults_follow_schedule():
    cfg = TrainConfig()
    assert (cfg.total_iters, cfg.densify_until, cfg.geo_reg_start) == (10000, 5000, 1000)
    assert (cfg.beta_reset_interval, cfg.beta_reset_until, cfg.virtual_view_interval) == (1000, 5000, 50)
    assert cfg.lr_position == 1.6e-4 and cfg.lr_position_final == 1.6e-6


@pytest.mark.parametrize("kw", [dict(geo_reg_start=6000), dict(densify_until=20000),
                                dict(lr_beta=0.0), dict(virtual_view_interval=0)])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


def test_scaled_schedule():
    cfg = TrainConfig.scaled(3000)
    assert (cfg.densify_until, cfg.geo_reg_start, cfg.beta_reset_interval) == (1500, 300, 300)
    assert cfg.beta_reset_until == 1500 and cfg.virtual_view_interval == 50
    assert TrainConfig.scaled(3000, seed=4).seed == 4


def test_position_lr_decays_log_linearly():
    cfg = TrainConfig()
    assert position_lr(cfg, 0) == pytest.approx(1.6e-4)
    assert position_lr(cfg, 10000) == pytest.approx(1.6e-6)
    assert position_lr(cfg, 5000) == pytest.approx(1.6e-5)


def test_adam_first_step_moves_by_lr():
    opt = Adam({"x": np.zeros(3)}, {"x": 0.1})
    out = opt.step({"x": np.zeros(3)}, {"x": np.array([2.0, -1e-3, 0.0])})
    assert np.allclose(out["x"], [-0.1, 0.1, 0.0])
    opt.reset("x")
    assert opt.t["x"] == 0 and not opt.m["x"].any()


# -- initialization ----------------------------------------------------------------


def test_single_point_init():
    f = init_from_points([[1.0, 2.0, 3.0]])
    assert f.count == 1 and np.array_equal(f.mu[0], [1, 2, 3])
    assert np.allclose(f.scales, 0.01)
    assert np.allclose(f.opacity, INIT_OPACITY) and f.beta == pytest.approx(2.0)
    assert np.allclose(f.q, [[1, 0, 0, 0]]) and np.allclose(f.c, 0.5)


def test_grid_init_scales_match_spacing():
    h = 0.05
    g = np.arange(10) * h
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    f = init_from_points(pts)
    interior = np.all((pts > 0) & (pts < 9 * h), axis=1)
    assert np.allclose(f.scales[interior], h)


def test_colors_copied():
    cols = np.random.default_rng(0).uniform(size=(5, 3))
    f = init_from_points(np.random.default_rng(1).normal(size=(5, 3)), cols)
    assert np.array_equal(f.c, cols)


def test_empty_cloud_rejected():
    with pytest.raises(ValueError):
        init_from_points(np.zeros((0, 3)))


# -- density control ------------------------------------------------------------------


def _blob_field(n=6, scale=0.005, opacity=0.5):
    rng = np.random.default_rng(0)
    return GaussianField(rng.normal(size=(n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.full((n, 3), math.log(scale)), np.full(n, logit(opacity)),
                         rng.uniform(size=(n, 3)), 0.3)


def test_quiet_field_unchanged():
    f = _blob_field()
    g, index = densify_and_prune(f, np.zeros(f.count), TrainConfig(), 100, 1.0, np.random.default_rng(0))
    assert np.array_equal(index, np.arange(f.count))
    for a, b in zip(f.arrays().values(), g.arrays().values()):
        assert np.array_equal(a, b)


def test_transparent_gaussian_pruned():
    f = _blob_field()
    f.rho[2] = logit(1e-4)
    g, index = densify_and_prune(f, np.zeros(f.count), TrainConfig(), 100, 1.0, np.random.default_rng(0))
    assert g.count == f.count - 1 and 2 not in index
    h, idx = prune_only(f, 5e-3)
    assert h.count == f.count - 1 and list(idx) == [0, 1, 3, 4, 5]


def test_small_hot_gaussian_cloned():
    f = _blob_field()
    grads = np.zeros(f.count)
    grads[1] = 1.0
    g, index = densify_and_prune(f, grads, TrainConfig(), 100, 1.0, np.random.default_rng(0))
    assert g.count == f.count + 1 and index[-1] == -1
    assert np.array_equal(g.mu[-1], f.mu[1]) and np.array_equal(g.s[-1], f.s[1])


def test_large_hot_gaussian_split_by_factor():
    f = _blob_field(scale=0.2)
    grads = np.zeros(f.count)
    grads[3] = 1.0
    g, index = densify_and_prune(f, grads, TrainConfig(), 100, 1.0, np.random.default_rng(0))
    assert g.count == f.count + 1
    assert 3 not in index and list(index[-2:]) == [-1, -1]
    assert np.allclose(g.scales[-2:], 0.2 / SPLIT_FACTOR)
    # children stay within a few parent sigmas
    assert np.all(np.linalg.norm(g.mu[-2:] - f.mu[3], axis=1) < 5 * 0.2 * math.sqrt(3))


def test_budget_keeps_strongest_candidates():
    f = _blob_field(n=10)
    grads = np.linspace(1e-3, 1e-2, 10)
    cfg = TrainConfig(max_gaussians=13)
    g, index = densify_and_prune(f, grads, cfg, 100, 1.0, np.random.default_rng(0))
    assert g.count == 13
    new = g.mu[index == -1]
    assert np.allclose(np.sort(new[:, 0]), np.sort(f.mu[7:, 0]))


def test_no_densification_after_cutoff():
    f = _blob_field()
    with pytest.raises(ValueError):
        densify_and_prune(f, np.zeros(f.count), TrainConfig(), 5000, 1.0, np.random.default_rng(0))


def test_reset_cadence():
    cfg = TrainConfig()
    f = _blob_field()
    assert reset_solidness(f, 1000, cfg) and f.beta == pytest.approx(2.0)
    f.beta_raw = 3.0
    assert not reset_solidness(f, 6000, cfg) and f.beta_raw == 3.0
    assert not reset_solidness(f, 999, cfg) and f.beta_raw == 3.0
    assert not reset_solidness(f, 0, cfg)
    assert reset_solidness(f, 5000, cfg)


def test_normalization_round_trip():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(50, 3)) * 3 + 7
    norm = Normalization.from_points(pts)
    unit = norm.points(pts)
    assert np.max(np.linalg.norm(unit, axis=1)) == pytest.approx(1.0)
    f = init_from_points(pts)
    back = norm.to_world(norm.to_unit(f))
    assert np.allclose(back.mu, f.mu) and np.allclose(back.s, f.s)


def test_camera_extent(tiny_bundle):
    cams = tiny_bundle.cameras
    centers = np.array([c.center for c in cams])
    expect = 1.1 * np.max(np.linalg.norm(centers - centers.mean(0), axis=1))
    assert camera_extent(cams) == pytest.approx(expect)


# -- training ------------------------------------------------------------------------


def test_zero_iterations_returns_init(tmp_path, tiny_bundle):
    res = train(tiny_bundle, TrainConfig.scaled(0), tmp_path)
    ref = init_from_points(tiny_bundle.init_points, tiny_bundle.init_colors)
    assert np.allclose(res.field.mu, ref.mu) and np.allclose(res.field.s, ref.s)
    assert res.metrics == []
    assert (tmp_path / "checkpoint_00000.ply").exists() and (tmp_path / "final.ply").exists()
    assert (tmp_path / "metrics.csv").read_text().strip().split(",") == list(METRIC_COLUMNS)


def test_short_run_outputs_and_invariants(tmp_path, tiny_bundle):
    cfg = _tiny_cfg()
    res = train(tiny_bundle, cfg, tmp_path)
    rows = res.metrics
    assert [r["iter"] for r in rows] == list(range(1, 41))
    assert res.reset_iters == [20]
    counts = [r["num_gaussians"] for r in rows]
    assert len(set(counts[29:])) == 1  # no densification at or after densify_until
    assert all(r["L_d"] == 0 and r["L_nc"] == 0 for r in rows[:4])
    assert all(r["beta_g"] > 1 for r in rows)
    evals = [r["iter"] for r in rows if not math.isnan(r["psnr_holdout"])]
    assert evals == [20, 40]
    for name in ("checkpoint_00020.ply", "checkpoint_00040.ply", "final.ply", "metrics.csv"):
        assert (tmp_path / name).exists()
    saved = load_field(tmp_path / "final.ply")
    assert saved.count == res.field.count and np.allclose(saved.mu, res.field.mu)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert len(lines) == 41


def test_fixed_seed_gives_identical_logs(tmp_path, tiny_bundle):
    cfg = _tiny_cfg(25, densify_until=20)
    train(tiny_bundle, cfg, tmp_path / "a")
    train(tiny_bundle, cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_photometric_loss_improves(tiny_bundle):
    # keep the geometric terms off so only color fitting and the priors act
    res = train(tiny_bundle, _tiny_cfg(60, densify_until=40, beta_reset_until=40, geo_reg_start=39))
    first = np.mean([r["L_c"] for r in res.metrics[:3]])
    last = np.mean([r["L_c"] for r in res.metrics[-3:]])
    assert last < first


def test_missing_priors_is_configuration_error(tiny_bundle):
    b = tiny_bundle.subset([0, 1])
    b.priors = []
    with pytest.raises(ConfigurationError):
        train(b, _tiny_cfg())
    # disabling the prior terms makes the same bundle trainable
    train(b, _tiny_cfg(3, densify_from=1, densify_until=2, geo_reg_start=1, use_priors=False))


def test_needs_two_views(tiny_bundle):
    with pytest.raises(ValueError):
        train(tiny_bundle.subset([0]), _tiny_cfg())


def test_divergence_reports_iteration(tiny_bundle):
    b = tiny_bundle.subset([0, 1, 2])
    b.images = [img.copy() for img in b.images]
    b.images[0][0, 0, 0] = np.nan
    b.images[1][0, 0, 0] = np.nan
    b.images[2][0, 0, 0] = np.nan
    with pytest.raises(DivergenceError) as err:
        train(b, _tiny_cfg())
    assert err.value.iteration == 1


def test_loss_weights_reject_negative():
    with pytest.raises(ConfigurationError):
        LossWeights(lambda_d=-1)
