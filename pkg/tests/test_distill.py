import numpy as np
import pytest

from depthforge import distill
from depthforge.cdcgan import GanConfig, build_discriminator, build_generator, onehot
from depthforge.distill import KdConfig
from depthforge.nncore import LayerSpec, Network

SMALL = GanConfig(latent_dim=8, image_size=32, base_channels=2, batch=4)


def _pair(dtype=np.float32, scale=1.0):
    specs = [LayerSpec("dense", in_features=3, out_features=4), LayerSpec("batchnorm1d", channels=4)]
    t = Network.build(specs, seed=0, std=scale).astype(dtype)
    s = Network.build(specs, seed=1, std=scale).astype(dtype)
    for net, v in ((t, 0.3), (s, -0.7)):
        net.states[1].buffers["running_mean"] = np.full(4, v, dtype)
    return t, s


def _closed_form(t0, s, tau, n):
    return tau ** n * t0 + (1 - tau ** n) * s


@pytest.mark.parametrize("tau", [0.0, 0.5, 0.994, 1.0])
@pytest.mark.parametrize("dtype,scale", [(np.float64, 1.0), (np.float32, 0.02)])
def test_ema_constant_student_matches_closed_form(tau, dtype, scale):
    teacher, student = _pair(dtype, scale)
    t0 = [a.astype(np.float64).copy() for _, _, a in teacher.arrays()]
    n = 500
    for _ in range(n):
        distill.ema_update(teacher, student, tau)
    for a0, (_, name, a), (_, _, s) in zip(t0, teacher.arrays(), student.arrays()):
        np.testing.assert_allclose(a, _closed_form(a0, s.astype(np.float64), tau, n), rtol=0, atol=1e-6,
                                   err_msg=name)


def test_ema_covers_buffers_and_leaves_student_alone():
    teacher, student = _pair(np.float64)
    before = [a.copy() for _, _, a in student.arrays()]
    distill.ema_update(teacher, student, 0.5)
    np.testing.assert_allclose(teacher.states[1].buffers["running_mean"], -0.2)
    for b, (_, _, a) in zip(before, student.arrays()):
        np.testing.assert_array_equal(a, b)


def test_ema_rejects_mismatched_networks():
    a = Network.build([LayerSpec("dense", in_features=3, out_features=4)], seed=0)
    b = Network.build([LayerSpec("dense", in_features=3, out_features=5)], seed=0)
    with pytest.raises(ValueError):
        distill.ema_update(a, b, 0.9)


def test_kd_losses_vanish_for_identical_networks():
    rng = np.random.default_rng(0)
    g = build_generator(SMALL)
    d = build_discriminator(SMALL)
    z = rng.standard_normal((4, 8)).astype(np.float32)
    y = onehot(np.array([0, 1, 2, 0]), 3)
    loss, grads = distill.kd_gen_loss(distill.make_teacher(g), g, z, y)
    assert loss == 0.0
    assert all(np.all(gr == 0) for layer in grads for gr in layer.values())
    imgs = rng.uniform(-1, 1, (4, 1, 32, 32)).astype(np.float32)
    loss, _ = distill.kd_disc_loss(distill.make_teacher(d), d, imgs, y)
    assert loss == 0.0


def test_kd_gen_loss_is_mean_squared_pixel_difference():
    rng = np.random.default_rng(1)
    student = build_generator(SMALL, seed=0)
    teacher = build_generator(SMALL, seed=5)
    z = rng.standard_normal((4, 8)).astype(np.float32)
    y = onehot(np.array([0, 1, 2, 1]), 3)
    loss, _ = distill.kd_gen_loss(teacher, student, z, y)
    inp = np.concatenate([z, y], 1)
    ref = np.mean((teacher.forward(inp, "frozen")[0].astype(np.float64)
                   - student.forward(inp, "frozen")[0]) ** 2)
    assert loss == pytest.approx(ref, rel=1e-6)
    assert loss > 0


def test_l2_consistency_gradient_matches_finite_difference():
    rng = np.random.default_rng(2)
    t = rng.standard_normal((2, 3))
    s = rng.standard_normal((2, 3))
    _, g = distill.l2_consistency(t, s)
    h = 1e-6
    for idx in np.ndindex(s.shape):
        sp, sm = s.copy(), s.copy()
        sp[idx] += h
        sm[idx] -= h
        num = (distill.l2_consistency(t, sp)[0] - distill.l2_consistency(t, sm)[0]) / (2 * h)
        assert g[idx] == pytest.approx(num, rel=1e-6)


def test_total_loss_and_config_validation():
    assert distill.total_gen_loss(0.7, 0.2, 0.5) == pytest.approx(0.8)
    with pytest.raises(FloatingPointError):
        distill.total_gen_loss(float("nan"), 0.0, 1.0)
    assert KdConfig(tau=0.999).tau == 0.999
    assert not KdConfig(lambda_kd_g=0, lambda_kd_d=0).enabled
    with pytest.raises(ValueError, match="kd.tau"):
        KdConfig(tau=1.5)
