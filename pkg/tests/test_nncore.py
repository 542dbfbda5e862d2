import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthforge import nncore
from depthforge.nncore import LayerSpec, Network


def naive_conv2d(x, W, b, stride, pad):
    n, c, h, w = x.shape
    oc, _, k, _ = W.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, W) + b
    return out


def naive_conv_transpose(x, W, b, stride, pad):
    # W has shape (in_channels, out_channels, k, k); scatter each input pixel.
    n, ic, h, w = x.shape
    _, oc, k, _ = W.shape
    full = np.zeros((n, oc, (h - 1) * stride + k, (w - 1) * stride + k))
    for i in range(h):
        for j in range(w):
            full[:, :, i * stride:i * stride + k, j * stride:j * stride + k] += np.einsum(
                "nc,cokl->nokl", x[:, :, i, j], W)
    if pad:
        full = full[:, :, pad:-pad, pad:-pad]
    return full + b[None, :, None, None]


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (4, 2, 1), (3, 2, 0), (5, 3, 2)])
def test_conv2d_matches_naive_loop(k, stride, pad):
    rng = np.random.default_rng(1)
    spec = LayerSpec("conv2d", in_channels=2, out_channels=3, kernel=k, stride=stride, padding=pad)
    state = nncore.init_state(spec, rng, std=0.5)
    state.params["b"] = rng.standard_normal(3).astype(np.float32)
    x = rng.standard_normal((2, 2, 9, 9)).astype(np.float32)
    out, _ = nncore.forward(spec, state, x)
    ref = naive_conv2d(x.astype(np.float64), state.params["W"].astype(np.float64), state.params["b"], stride, pad)
    np.testing.assert_allclose(out, ref, atol=1e-5)


@pytest.mark.parametrize("k,stride,pad", [(4, 2, 1), (3, 1, 1), (4, 2, 0)])
def test_conv_transpose_matches_naive_scatter(k, stride, pad):
    rng = np.random.default_rng(2)
    spec = LayerSpec("convT2d", in_channels=3, out_channels=2, kernel=k, stride=stride, padding=pad)
    state = nncore.init_state(spec, rng, std=0.5)
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    out, _ = nncore.forward(spec, state, x)
    ref = naive_conv_transpose(x.astype(np.float64), state.params["W"].astype(np.float64),
                               state.params["b"], stride, pad)
    assert out.shape == ref.shape == (2, 2, nncore.convT_out_size(5, k, stride, pad),
                                      nncore.convT_out_size(5, k, stride, pad))
    np.testing.assert_allclose(out, ref, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(k=st.integers(1, 4), stride=st.integers(1, 3), pad=st.integers(0, 2), size=st.integers(5, 9),
       seed=st.integers(0, 2**16))
def test_col2im_is_adjoint_of_im2col(k, stride, pad, size, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, size, size))
    cols, _, _ = nncore.im2col(x, k, stride, pad)
    c = rng.standard_normal(cols.shape)
    lhs = float((cols * c).sum())
    rhs = float((x * nncore.col2im(c, x.shape, k, stride, pad)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


@pytest.mark.parametrize("spec", nncore.standard_gradcheck_specs(), ids=lambda s: s.label)
def test_every_layer_passes_gradient_check(spec):
    report = nncore.gradient_check(spec, random_seed=0)
    assert report.passed, report.max_rel_err


def test_gradient_check_error_shrinks_quadratically_with_step():
    # Central differences have O(h^2) truncation error, so a tenfold smaller
    # step must cut the discrepancy by roughly 100x if the backward is exact.
    spec = LayerSpec("batchnorm1d", channels=5)
    coarse = nncore.gradient_check(spec, h=1e-3).worst
    fine = nncore.gradient_check(spec, h=1e-4).worst
    assert fine < coarse / 50


def test_gradient_check_detects_a_wrong_backward(monkeypatch):
    real_backward = nncore.backward

    def broken(spec, state, cache, upstream):
        dx, grads = real_backward(spec, state, cache, upstream)
        return dx * 1.01, grads

    monkeypatch.setattr(nncore, "backward", broken)
    assert not nncore.gradient_check(LayerSpec("tanh")).passed


def test_leaky_relu_slope_and_relu():
    x = np.array([[-2.0, -0.5, 0.5, 3.0]], dtype=np.float32)
    out, _ = nncore.forward(LayerSpec("leaky_relu", negative_slope=0.2), nncore.LayerState(), x)
    np.testing.assert_allclose(out, [[-0.4, -0.1, 0.5, 3.0]], rtol=1e-6)
    out, _ = nncore.forward(LayerSpec("relu"), nncore.LayerState(), x)
    np.testing.assert_array_equal(out, [[0, 0, 0.5, 3.0]])


def test_batchnorm_modes():
    rng = np.random.default_rng(0)
    spec = LayerSpec("batchnorm2d", channels=2, momentum=0.1)
    state = nncore.init_state(spec, rng)
    x = (rng.standard_normal((8, 2, 4, 4)) * 3 + 5).astype(np.float32)

    out, _ = nncore.forward(spec, state, x, "frozen")
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_array_equal(state.buffers["running_mean"], 0)   # frozen leaves buffers alone

    nncore.forward(spec, state, x, "train")
    expected = 0.1 * x.astype(np.float64).mean(axis=(0, 2, 3))
    np.testing.assert_allclose(state.buffers["running_mean"], expected, rtol=1e-5)

    out_eval, cache = nncore.forward(spec, state, x, "eval")
    mu = state.buffers["running_mean"]
    var = state.buffers["running_var"]
    ref = (x - mu[None, :, None, None]) / np.sqrt(var[None, :, None, None] + spec.eps)
    np.testing.assert_allclose(out_eval, ref, rtol=1e-4, atol=1e-4)
    with pytest.raises(ValueError):
        nncore.backward(spec, state, cache, np.ones_like(out_eval))


def test_minibatch_std_feature_matches_per_group_loop():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((8, 2, 3, 3)).astype(np.float32)
    out, _ = nncore.forward(LayerSpec("minibatch_std", group=4), nncore.LayerState(), x)
    assert out.shape == (8, 3, 3, 3)
    np.testing.assert_array_equal(out[:, :2], x)
    for start in (0, 4):
        grp = x[start:start + 4].astype(np.float64)
        ref = np.mean([np.sqrt(np.var(grp[:, c, i, j]) + 1e-8)
                       for c in range(2) for i in range(3) for j in range(3)])
        np.testing.assert_allclose(out[start:start + 4, 2], ref, rtol=1e-6)


def test_minibatch_std_groups_stay_within_halves():
    # a constant first half must report zero spread whatever the second half holds
    x = np.concatenate([np.ones((4, 1, 2, 2)), np.random.default_rng(0).standard_normal((4, 1, 2, 2))])
    out, _ = nncore.forward(LayerSpec("minibatch_std", group=4), nncore.LayerState(), x.astype(np.float32))
    np.testing.assert_allclose(out[:4, 1], 1e-4, rtol=1e-3)
    assert out[4:, 1].min() > 0.1
    # a batch of 6 with group 4 falls back to groups of 3
    out6, _ = nncore.forward(LayerSpec("minibatch_std", group=4), nncore.LayerState(), x[:6].astype(np.float32))
    np.testing.assert_allclose(out6[:3, 1], 1e-4, rtol=1e-3)


def test_adam_first_step_moves_by_lr():
    spec = LayerSpec("dense", in_features=3, out_features=2)
    state = nncore.init_state(spec, np.random.default_rng(0))
    before = state.params["W"].copy()
    g = np.array([[1.0, -2.0, 0.5], [3.0, -1.0, 0.0]], dtype=np.float32)
    nncore.adam_step(spec, state, {"W": g, "b": np.zeros(2, np.float32)}, lr=1e-2)
    # With bias correction the first update is lr * sign(g) (up to eps).
    np.testing.assert_allclose(before - state.params["W"], 1e-2 * np.sign(g), atol=1e-6)


def test_adam_rejects_non_finite_gradients():
    spec = LayerSpec("dense", name="head", in_features=2, out_features=1)
    state = nncore.init_state(spec, np.random.default_rng(0))
    with pytest.raises(nncore.NonFiniteError, match="head"):
        nncore.adam_step(spec, state, {"W": np.array([[np.nan, 0.0]]), "b": np.zeros(1)}, lr=1e-3)


def test_shape_mismatch_is_reported():
    spec = LayerSpec("dense", name="fc", in_features=4, out_features=2)
    state = nncore.init_state(spec, np.random.default_rng(0))
    with pytest.raises(ValueError, match="fc"):
        nncore.forward(spec, state, np.zeros((3, 5), np.float32))


def _small_net(seed=0):
    specs = [LayerSpec("conv2d", in_channels=1, out_channels=2, kernel=3, padding=1),
             LayerSpec("batchnorm2d", channels=2), LayerSpec("relu"),
             LayerSpec("reshape", shape=(32,)), LayerSpec("dense", in_features=32, out_features=1)]
    return Network.build(specs, seed=seed, meta={"tag": "t"})


def test_network_checkpoint_round_trip(tmp_path):
    net = _small_net()
    x = np.random.default_rng(3).standard_normal((4, 1, 4, 4)).astype(np.float32)
    out, caches = net.forward(x, "train")
    _, grads = net.backward(caches, np.ones_like(out))
    net.adam_step(grads, 1e-3)
    nncore.save_network(tmp_path, net)
    loaded = nncore.load_network(tmp_path)
    for (i, n, a), (j, m, b) in zip(net.arrays(), loaded.arrays()):
        assert (i, n) == (j, m)
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(net(x), loaded(x))
    assert [s.t for s in loaded.states] == [s.t for s in net.states]
    raw = (tmp_path / "weights.bin").read_bytes()
    assert raw[:8] == nncore.WEIGHTS_MAGIC
    assert len(raw) == 16 + 4 * sum(a.size for _, _, a in net.arrays())


def test_weights_with_wrong_layout_are_rejected(tmp_path):
    net = _small_net()
    nncore.write_weights(tmp_path / "w.bin", net)
    other = Network.build([LayerSpec("dense", in_features=3, out_features=1)], seed=0)
    with pytest.raises(ValueError, match="layout"):
        nncore.read_weights(tmp_path / "w.bin", other)


def test_thread_limit_reads_environment(monkeypatch):
    monkeypatch.setenv("DEPTHFORGE_THREADS", "3")
    assert nncore.thread_limit() == 3
    monkeypatch.delenv("DEPTHFORGE_THREADS")
    assert nncore.thread_limit() >= 1
