import numpy as np
import pytest

from depthforge import baselines
from depthforge.baselines import BaselineConfig
from depthforge.dataio import FixtureConfig, fixture_arrays, load_image


@pytest.fixture(scope="module")
def faces():
    return fixture_arrays(FixtureConfig(n_per_class=40, image_size=32, seed=2))


def test_zero_bandwidth_returns_training_copies(faces):
    imgs, labels = faces
    s = baselines.kde_fit(imgs, labels, bandwidth=0.0)
    out = baselines.kde_sample(s, 1, 25, seed=3)
    train = imgs[labels == 1]
    for o in out:
        assert any(np.array_equal(o, t) for t in train)


def test_kde_sample_mean_matches_training_mean():
    rng = np.random.default_rng(0)
    train = rng.uniform(0.3, 0.7, (12, 8, 8))
    h = 0.05
    s = baselines.kde_fit(train, np.zeros(12, int), bandwidth=h)
    draws = baselines.kde_sample(s, 0, 1000, seed=1)
    # Each draw is a uniform pick plus noise, so its per-pixel variance is
    # the training variance plus h^2. Clipping never triggers in this range.
    sigma = np.sqrt(train.var(axis=0) + h * h)
    z = np.abs(draws.mean(axis=0) - train.mean(axis=0)) / (sigma / np.sqrt(1000))
    assert np.mean(z <= 3) >= 0.95
    assert z.max() <= 4.5


def test_kde_is_seeded_and_in_range(faces):
    imgs, labels = faces
    s = baselines.kde_fit(imgs, labels, bandwidth=0.3)
    a = baselines.kde_sample(s, 2, 10, seed=5)
    np.testing.assert_array_equal(a, baselines.kde_sample(s, 2, 10, seed=5))
    assert not np.array_equal(a, baselines.kde_sample(s, 2, 10, seed=6))
    assert a.min() >= 0 and a.max() <= 1
    with pytest.raises(ValueError, match="no training images"):
        baselines.kde_sample(baselines.kde_fit(imgs[:3], np.zeros(3, int)), 1, 2)
    with pytest.raises(ValueError):
        baselines.kde_fit(imgs, labels, bandwidth=-1)


def test_em_log_likelihood_never_decreases():
    rng = np.random.default_rng(1)
    Z = np.concatenate([rng.normal(-3, 1, (150, 3)), rng.normal(2, 0.5, (100, 3))])
    g = baselines.em_diag_gmm(Z, 4, seed=0)
    ll = np.array(g.log_likelihood)
    assert len(ll) > 2
    assert np.all(np.diff(ll) >= -1e-10)
    assert g.weights.sum() == pytest.approx(1.0)
    assert g.variances.min() >= baselines.VAR_FLOOR
    assert g.score(Z) == pytest.approx(ll[-1], abs=1e-3)


def test_single_component_sits_at_the_data_mean():
    Z = np.random.default_rng(2).standard_normal((80, 5)) + [1, 2, 3, 4, 5]
    g = baselines.em_diag_gmm(Z, 1)
    np.testing.assert_allclose(g.means[0], Z.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(g.variances[0], Z.var(axis=0), atol=1e-12)


def test_duplicate_points_hit_the_variance_floor():
    Z = np.zeros((20, 2))
    Z[10:] = 1.0
    g = baselines.em_diag_gmm(Z, 2, seed=0)
    assert np.all(np.isfinite(g.means))
    assert g.variances.min() == baselines.VAR_FLOOR
    with pytest.raises(ValueError, match="k=5"):
        baselines.em_diag_gmm(Z[:3], 5)


def test_gmm_samples_lie_in_the_pca_span(faces):
    imgs, labels = faces
    s = baselines.gmm_fit(imgs, labels, k=3, d=8, seed=0)
    raw = baselines.gmm_sample(s, 0, 20, seed=1, clamp=False).reshape(20, -1).astype(np.float64)
    mu, B = s.mean[0], s.basis[0]
    np.testing.assert_allclose(B @ B.T, np.eye(8), atol=1e-10)
    resid = (raw - mu) - ((raw - mu) @ B.T) @ B
    assert np.abs(resid).max() < 1e-5
    clamped = baselines.gmm_sample(s, 0, 20, seed=1)
    assert clamped.min() >= 0 and clamped.max() <= 1
    assert clamped.shape == (20, 32, 32)


def test_gmm_is_seeded(faces):
    imgs, labels = faces
    a = baselines.gmm_fit(imgs, labels, k=2, d=4, seed=3)
    b = baselines.gmm_fit(imgs, labels, k=2, d=4, seed=3)
    np.testing.assert_array_equal(baselines.gmm_sample(a, 1, 5, 0), baselines.gmm_sample(b, 1, 5, 0))
    with pytest.raises(ValueError, match="class 7"):
        baselines.gmm_sample(a, 7, 1)


def test_write_samples_layout(tmp_path, faces):
    imgs, _ = faces
    paths = baselines.write_samples(tmp_path, {0: imgs[:2], 2: imgs[2:3]}, ["neutral", "happy", "fear"])
    assert sorted(p.name for p in paths) == ["fear_0000.png", "neutral_0000.png", "neutral_0001.png"]
    assert np.abs(load_image(paths[0]).pixels - imgs[0]).max() <= 0.5 / 255 + 1e-12


def test_config_validation():
    with pytest.raises(ValueError, match="baselines.kde_bandwidth"):
        BaselineConfig(kde_bandwidth=-0.1)
