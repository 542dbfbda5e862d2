import numpy as np
import pytest

from depthforge import cdcgan
from depthforge.cdcgan import GanConfig
from depthforge.dataio import FixtureConfig, fixture_arrays, normalize
from depthforge.distill import KdConfig

TINY = GanConfig(latent_dim=16, image_size=32, batch=8, epochs=2, base_channels=2, lr_g=2e-4, lr_d=2e-4)


@pytest.fixture(scope="module")
def tiny_data():
    imgs, labels = fixture_arrays(FixtureConfig(n_per_class=12, image_size=32, seed=3))
    return normalize(imgs)[:, None].astype(np.float32), labels


def test_network_shapes_for_each_image_size():
    for size in (32, 64, 128):
        cfg = GanConfig(latent_dim=8, image_size=size, base_channels=2)
        g = cdcgan.build_generator(cfg)
        d = cdcgan.build_discriminator(cfg)
        imgs = cdcgan.generate(g, np.zeros((3, 8)), [0, 1, 2])
        assert imgs.shape == (3, size, size)
        assert np.all(np.abs(imgs) <= 1)
        logits = d(cdcgan.disc_input(imgs[:, None], cdcgan.onehot(np.array([0, 1, 2]), 3)))
        assert logits.shape == (3, 1)


def test_generate_single_latent_and_label_checks():
    g = cdcgan.build_generator(GanConfig(latent_dim=8, image_size=32, base_channels=2))
    assert cdcgan.generate(g, np.zeros(8), 1).shape == (32, 32)
    with pytest.raises(ValueError, match="latent"):
        cdcgan.generate(g, np.zeros(7), 1)
    with pytest.raises(ValueError, match="labels"):
        cdcgan.generate(g, np.zeros(8), 3)


def test_label_conditioning_changes_output():
    g = cdcgan.build_generator(GanConfig(latent_dim=8, image_size=32, base_channels=2), seed=4)
    z = np.random.default_rng(0).standard_normal(8)
    assert not np.allclose(cdcgan.generate(g, z, 0), cdcgan.generate(g, z, 2))


def test_bce_helpers_match_direct_formulas():
    logits = np.array([[-30.0], [-1.0], [0.0], [2.5], [40.0]], dtype=np.float32)
    p = 1 / (1 + np.exp(-logits.astype(np.float64)))
    real, g_real = cdcgan.bce_real(logits)
    fake, g_fake = cdcgan.bce_fake(logits)
    assert real == pytest.approx(np.mean(-np.log(p)), rel=1e-9)
    assert fake == pytest.approx(np.mean(-np.log1p(-p[:4])) * 4 / 5 + 40.0 / 5, rel=1e-9)
    np.testing.assert_allclose(g_real, (p - 1) / 5, rtol=1e-6, atol=1e-12)
    np.testing.assert_allclose(g_fake, p / 5, rtol=1e-6, atol=1e-12)


def test_config_validation_names_the_key():
    with pytest.raises(ValueError, match="gan.lr_g"):
        GanConfig(lr_g=-1)
    with pytest.raises(ValueError, match="gan.image_size"):
        GanConfig(image_size=48)


def test_training_is_finite_and_deterministic(tmp_path, tiny_data):
    x, y = tiny_data
    a, ev_a = cdcgan.train(x, y, TINY, KdConfig(), tmp_path / "a")
    b, ev_b = cdcgan.train(x, y, TINY, KdConfig(), tmp_path / "b")
    assert len(ev_a) == 2
    assert all(np.all(np.isfinite(e.row())) for e in ev_a)
    assert (tmp_path / "a/losses.csv").read_bytes() == (tmp_path / "b/losses.csv").read_bytes()
    losses = cdcgan.read_losses(tmp_path / "a/losses.csv")
    assert list(losses["epoch"]) == [1, 2]
    assert np.all(losses["kd_g"] > 0)


def test_ablation_has_no_teachers(tmp_path, tiny_data):
    x, y = tiny_data
    state, events = cdcgan.train(x, y, TINY, KdConfig(lambda_kd_g=0, lambda_kd_d=0), tmp_path)
    assert state.teacher_g is None
    assert all(e.kd_g_loss == 0 and e.kd_d_loss == 0 for e in events)
    assert cdcgan.sampling_generator(state) is state.gen


def test_resume_continues_exactly(tmp_path, tiny_data):
    x, y = tiny_data
    cdcgan.train(x, y, TINY, KdConfig(), tmp_path / "full")
    one = GanConfig(**{**TINY.__dict__, "epochs": 1})
    cdcgan.train(x, y, one, KdConfig(), tmp_path / "split")
    state, _ = cdcgan.train(x, y, TINY, KdConfig(), tmp_path / "split", resume=tmp_path / "split/checkpoint")
    assert state.epoch == 2
    assert (tmp_path / "full/losses.csv").read_bytes() == (tmp_path / "split/losses.csv").read_bytes()
    for name in ("weights.bin", "teacher_g.bin", "adam.bin"):
        assert (tmp_path / "full/checkpoint" / name).read_bytes() == (tmp_path / "split/checkpoint" / name).read_bytes()


def test_checkpoint_round_trip_preserves_sampling(tmp_path, tiny_data):
    x, y = tiny_data
    state, _ = cdcgan.train(x, y, TINY, KdConfig(), tmp_path)
    loaded = cdcgan.load_checkpoint(tmp_path / "checkpoint")
    z = np.random.default_rng(9).standard_normal((4, 16))
    for use_student in (False, True):
        np.testing.assert_array_equal(
            cdcgan.generate(cdcgan.sampling_generator(state, use_student), z, [0, 1, 2, 0]),
            cdcgan.generate(cdcgan.sampling_generator(loaded, use_student), z, [0, 1, 2, 0]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported_with_location(tiny_data):
    x, y = tiny_data
    cfg = GanConfig(**{**TINY.__dict__, "epochs": 1})
    state = cdcgan.GanState.init(cfg, KdConfig())
    state.disc.states[-1].params["b"][...] = np.inf
    with pytest.raises(cdcgan.NonFiniteError, match="epoch 1, step 1"):
        cdcgan.train_epoch(state, x, y)


def test_dataset_checks(tmp_path, tiny_data):
    x, y = tiny_data
    with pytest.raises(ValueError, match="shape"):
        cdcgan.train(x[:, 0], y, TINY, KdConfig(), tmp_path)
    with pytest.raises(ValueError, match="batch"):
        cdcgan.train(x, y, GanConfig(**{**TINY.__dict__, "batch": 64}), KdConfig(), tmp_path)
