import math

import numpy as np
import pytest

import haccn


def test_density_map_mass():
    pts = np.array([[0.0, 0.0], [31.5, 12.2], [16.0, 16.0]])
    d = haccn.generate_density_map(pts, 32, 48, sigma=4.0)
    assert d.shape == (32, 48)
    assert abs(d.sum() - 3.0) < 1e-9
    assert (d >= 0).all()


def test_empty_annotation_gives_zero_map():
    d = haccn.generate_density_map(np.zeros((0, 2)), 16, 16)
    assert d.sum() == 0.0


def test_point_outside_image_rejected():
    with pytest.raises(ValueError):
        haccn.generate_density_map(np.array([[20.0, 1.0]]), 16, 16)


def test_downsample_keeps_count():
    rng = np.random.default_rng(1)
    m = rng.random((30, 22))
    s = haccn.downsample_density_map(m, 4)
    assert s.shape == (8, 6)
    assert s.sum() == pytest.approx(m.sum(), rel=1e-12)


def test_metrics():
    assert haccn.mae([10, 20], [12, 16]) == pytest.approx(3.0, abs=1e-12)
    assert haccn.mse([10, 20], [12, 16]) == pytest.approx(math.sqrt(10.0), abs=1e-12)


def test_aggregation_order():
    rng = np.random.default_rng(0)
    plane = rng.normal(size=(8, 8))
    gap = haccn.aggregate(plane, "gap")
    gmp = haccn.aggregate(plane, "gmp")
    lse = haccn.aggregate(plane, "lse", 4.0)
    assert gap <= lse <= gmp
    assert gap == pytest.approx(plane.mean())
    assert gmp == pytest.approx(plane.max())


def test_pseudo_gt_saturated_class():
    priors = [0.0, 3.0, 10.0, 25.0, 60.0, 120.0]
    scores = np.full((6, 5, 7), -20.0)
    scores[3] = 20.0
    d = haccn.pseudo_gt(scores, priors)
    assert d.sum() == pytest.approx(25.0, abs=1e-6)


def test_density_class_boundaries():
    assert haccn.density_class(0) == 0
    assert haccn.density_class(1) == 1
    assert haccn.density_class(50) == 2
    assert haccn.density_class(799.9) == 4
    assert haccn.density_class(800) == 5


def test_model_predict_and_checkpoint(tmp_path):
    img, pts = haccn.synth_scene("source", 64, 5)
    assert img.shape == (3, 64, 64)
    assert pts.shape[1] == 2
    m = haccn.Model("full", 0.125, 64)
    p = m.init_params(3)
    den, count = m.predict(p, img)
    assert den.shape == (16, 16)
    assert count == pytest.approx(den.sum())
    path = tmp_path / "m.hckp"
    haccn.save_checkpoint(str(path), m, p)
    m2, p2 = haccn.load_checkpoint(str(path))
    assert p2.checksum() == p.checksum()
    den2, _ = m2.predict(p2, img)
    np.testing.assert_array_equal(den, den2)


def test_odd_image_size_is_padded():
    m = haccn.Model("vgg", 0.125, 64)
    p = m.init_params(0)
    den, _ = m.predict(p, np.random.default_rng(0).random((3, 37, 50)))
    assert den.shape == (10, 13)


def test_dmap_roundtrip(tmp_path):
    d = np.arange(12, dtype=float).reshape(3, 4) / 7.0
    haccn.write_dmap(str(tmp_path / "a.dmap"), d, 4)
    back = haccn.read_dmap(str(tmp_path / "a.dmap"))
    np.testing.assert_allclose(back, d, rtol=1e-6)


def test_short_training_run_lowers_loss():
    model, params, losses = haccn.train_synthetic("vgg", n_images=3, iterations=30, lr=1e-3, seed=2)
    assert len(losses) == 30
    assert all(math.isfinite(v) for v in losses)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_bad_ablation():
    with pytest.raises(ValueError):
        haccn.Model("nope")
