"""Minimal differentiable layer toolkit.

Layers are described by a :class:`LayerSpec` and carry their parameters in a
:class:`LayerState`. ``forward`` returns the output plus a cache that
``backward`` consumes; nothing is recorded globally, so the two fixed GAN
networks are just ordered lists of layers.

Convolutions go through a single im2col/col2im pair. Transposed convolution
reuses the same kernels with the roles of forward and backward swapped.

Arrays are stored as float32. Batch-norm statistics, bias gradients and loss
means are accumulated in float64. Every op is dtype-generic, which is what
lets :func:`gradient_check` run the analytic side in float64.
"""
from __future__ import annotations

import copy
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

LAYER_KINDS = (
    "dense",
    "conv2d",
    "convT2d",
    "batchnorm2d",
    "batchnorm1d",
    "reshape",
    "minibatch_std",
    "leaky_relu",
    "relu",
    "tanh",
    "sigmoid",
)
PARAM_KINDS = ("dense", "conv2d", "convT2d", "batchnorm2d", "batchnorm1d")

WEIGHTS_MAGIC = b"DFNNWGT\x00"
WEIGHTS_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class LayerSpec:
    kind: str
    name: str = ""
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    channels: int = 0
    negative_slope: float = 0.2
    eps: float = 1e-5
    momentum: float = 0.1
    shape: tuple = ()
    group: int = 4

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.kernel < 1:
            raise ValueError(f"{self.label}: stride and kernel must be >= 1")
        if self.eps <= 0:
            raise ValueError(f"{self.label}: eps must be > 0")
        if self.group < 1:
            raise ValueError(f"{self.label}: group must be >= 1")
        self.shape = tuple(self.shape)

    @property
    def label(self):
        return self.name or self.kind

    def to_dict(self):
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LayerState:
    """Weights, running buffers and Adam moments of one layer."""

    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def conv_out_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def convT_out_size(size, kernel, stride, padding):
    return (size - 1) * stride - 2 * padding + kernel


# -- im2col / col2im --------------------------------------------------------

def im2col(x, k, stride, pad):
    """(N, C, H, W) -> (N, C*k*k, OH*OW) patch tensor, channel-major."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * k * k, oh * ow), oh, ow


def col2im(cols, x_shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patches back to (N, C, H, W)."""
    n, c, h, w = x_shape
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    cols = cols.reshape(n, c, k, k, oh, ow)
    hp, wp = h + 2 * pad, w + 2 * pad
    xp = np.empty((n, c, hp, wp), dtype=cols.dtype)
    # Group kernel taps by output phase so each phase is accumulated in a
    # dense buffer and written to the strided destination only once.
    for pi in range(stride):
        for pj in range(stride):
            buf = np.zeros((n, c, len(range(pi, hp, stride)), len(range(pj, wp, stride))), cols.dtype)
            for i in range(pi, k, stride):
                a = (i - pi) // stride
                for j in range(pj, k, stride):
                    b = (j - pj) // stride
                    buf[:, :, a:a + oh, b:b + ow] += cols[:, :, i, j]
            xp[:, :, pi::stride, pj::stride] = buf
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


# -- initialisation ---------------------------------------------------------

def init_state(spec, rng, std=0.02):
    """DCGAN init: N(0, std) weights, zero bias, unit BN scale."""
    st = LayerState()
    k = spec.kind
    if k == "dense":
        st.params["W"] = (rng.standard_normal((spec.out_features, spec.in_features)) * std).astype(DTYPE)
        st.params["b"] = np.zeros(spec.out_features, DTYPE)
    elif k == "conv2d":
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        st.params["W"] = (rng.standard_normal(shape) * std).astype(DTYPE)
        st.params["b"] = np.zeros(spec.out_channels, DTYPE)
    elif k == "convT2d":
        shape = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
        st.params["W"] = (rng.standard_normal(shape) * std).astype(DTYPE)
        st.params["b"] = np.zeros(spec.out_channels, DTYPE)
    elif k in ("batchnorm2d", "batchnorm1d"):
        st.params["gamma"] = np.ones(spec.channels, DTYPE)
        st.params["beta"] = np.zeros(spec.channels, DTYPE)
        st.buffers["running_mean"] = np.zeros(spec.channels, DTYPE)
        st.buffers["running_var"] = np.ones(spec.channels, DTYPE)
    for name, p in st.params.items():
        st.m[name] = np.zeros_like(p)
        st.v[name] = np.zeros_like(p)
    return st


# -- forward / backward -----------------------------------------------------

def _check_input(spec, x):
    k = spec.kind
    if k == "dense" and (x.ndim != 2 or x.shape[1] != spec.in_features):
        raise ShapeError(f"{spec.label}: expected (N, {spec.in_features}) input, got {x.shape}")
    if k in ("conv2d", "convT2d") and (x.ndim != 4 or x.shape[1] != spec.in_channels):
        raise ShapeError(
            f"{spec.label}: expected (N, {spec.in_channels}, H, W) input, got {x.shape}")
    if k == "batchnorm2d" and (x.ndim != 4 or x.shape[1] != spec.channels):
        raise ShapeError(f"{spec.label}: expected (N, {spec.channels}, H, W) input, got {x.shape}")
    if k == "batchnorm1d" and (x.ndim != 2 or x.shape[1] != spec.channels):
        raise ShapeError(f"{spec.label}: expected (N, {spec.channels}) input, got {x.shape}")
    if k == "conv2d" and min(x.shape[2:]) + 2 * spec.padding < spec.kernel:
        raise ShapeError(f"{spec.label}: spatial dims {x.shape[2:]} smaller than kernel {spec.kernel}")
    if k == "minibatch_std" and x.ndim != 4:
        raise ShapeError(f"{spec.label}: expected (N, C, H, W) input, got {x.shape}")
    if k == "reshape":
        per = int(np.prod(x.shape[1:]))
        if per != int(np.prod(spec.shape)):
            raise ShapeError(f"{spec.label}: cannot reshape {x.shape[1:]} to {spec.shape}")


def _bn_forward(spec, state, x, mode, axes):
    shape = [1] * x.ndim
    shape[1] = -1
    gamma = state.params["gamma"].reshape(shape)
    beta = state.params["beta"].reshape(shape)
    if mode == "eval":
        mean = state.buffers["running_mean"].astype(np.float64)
        var = state.buffers["running_var"].astype(np.float64)
        inv = 1.0 / np.sqrt(var + spec.eps)
        xhat = ((x - mean.reshape(shape)) * inv.reshape(shape)).astype(x.dtype)
        return gamma * xhat + beta, {"mode": "eval"}
    mean = x.mean(axis=axes, dtype=np.float64)
    var = ((x - mean.reshape(shape)) ** 2).mean(axis=axes, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + spec.eps)
    xhat = ((x - mean.reshape(shape)) * inv.reshape(shape)).astype(x.dtype)
    if mode == "train":
        mom = spec.momentum
        cnt = x.size // x.shape[1]
        unbiased = var * cnt / max(cnt - 1, 1)
        rm = state.buffers["running_mean"]
        rv = state.buffers["running_var"]
        state.buffers["running_mean"] = ((1 - mom) * rm + mom * mean).astype(rm.dtype)
        state.buffers["running_var"] = ((1 - mom) * rv + mom * unbiased).astype(rv.dtype)
    return gamma * xhat + beta, {"mode": mode, "xhat": xhat, "inv": inv, "axes": axes}


def _std_group(n, group):
    """Largest divisor of ``n`` not above ``group``."""
    return max(d for d in range(1, min(group, n) + 1) if n % d == 0)


def _mbstd_forward(spec, x):
    # groups are runs of consecutive samples, so a batch laid out as
    # [real | fake] never mixes the two halves when the half size divides
    n, c, h, w = x.shape
    gsz = _std_group(n, spec.group)
    xg = x.astype(np.float64).reshape(n // gsz, gsz, c, h, w)
    y = xg - xg.mean(axis=1, keepdims=True)
    std = np.sqrt((y * y).mean(axis=1) + 1e-8)
    feat = np.broadcast_to(std.mean(axis=(1, 2, 3))[:, None, None, None, None], (n // gsz, gsz, 1, h, w))
    out = np.concatenate([x, feat.reshape(n, 1, h, w).astype(x.dtype)], axis=1)
    return out, {"y": y, "std": std}


def _mbstd_backward(cache, g):
    y, std = cache["y"], cache["std"]
    m, gsz, c, h, w = y.shape
    gs = g[:, c:].astype(np.float64).reshape(m, gsz * h * w).sum(axis=1)
    coef = (gs / (c * h * w))[:, None, None, None, None]
    dx = g[:, :c] + (coef * y / (gsz * std[:, None])).reshape(m * gsz, c, h, w)
    return dx.astype(g.dtype)


def forward(spec, state, x, mode="train"):
    """Run one layer.

    ``mode`` is ``"train"`` (batch statistics, running buffers updated),
    ``"eval"`` (running statistics) or ``"frozen"`` (batch statistics
    without touching the buffers; used for teacher networks).
    """
    _check_input(spec, x)
    k = spec.kind
    p = state.params
    if k == "dense":
        out = x @ p["W"].T + p["b"]
        return out, {"x": x}
    if k == "conv2d":
        cols, oh, ow = im2col(x, spec.kernel, spec.stride, spec.padding)
        wmat = p["W"].reshape(spec.out_channels, -1)
        out = np.matmul(wmat, cols).reshape(x.shape[0], spec.out_channels, oh, ow)
        out += p["b"].reshape(1, -1, 1, 1)
        return out, {"cols": cols, "x_shape": x.shape}
    if k == "convT2d":
        n, c, h, w = x.shape
        kk = spec.kernel
        oh = convT_out_size(h, kk, spec.stride, spec.padding)
        ow = convT_out_size(w, kk, spec.stride, spec.padding)
        xf = x.reshape(n, c, h * w)
        cols = np.matmul(p["W"].reshape(c, -1).T, xf)
        out = col2im(cols, (n, spec.out_channels, oh, ow), kk, spec.stride, spec.padding)
        out = out + p["b"].reshape(1, -1, 1, 1)
        return out, {"xf": xf, "x_shape": x.shape}
    if k == "batchnorm2d":
        return _bn_forward(spec, state, x, mode, (0, 2, 3))
    if k == "batchnorm1d":
        return _bn_forward(spec, state, x, mode, (0,))
    if k == "reshape":
        return x.reshape((x.shape[0],) + spec.shape), {"x_shape": x.shape}
    if k == "minibatch_std":
        return _mbstd_forward(spec, x)
    if k == "leaky_relu":
        return np.where(x > 0, x, x * x.dtype.type(spec.negative_slope)), {"x": x}
    if k == "relu":
        return np.maximum(x, 0), {"x": x}
    if k == "tanh":
        y = np.tanh(x)
        return y, {"y": y}
    if k == "sigmoid":
        y = 1.0 / (1.0 + np.exp(-x))
        return y, {"y": y}
    raise ValueError(k)


def backward(spec, state, cache, upstream):
    """Return ``(input_grad, param_grads)`` for one layer."""
    k = spec.kind
    g = upstream
    if k == "dense":
        x = cache["x"]
        W = state.params["W"]
        grads = {"W": g.T @ x, "b": g.sum(axis=0, dtype=np.float64).astype(g.dtype)}
        return g @ W, grads
    if k == "conv2d":
        cols = cache["cols"]
        n, o, oh, ow = g.shape
        gf = g.reshape(n, o, oh * ow)
        W = state.params["W"]
        wmat = W.reshape(o, -1)
        grads = {
            "W": np.tensordot(gf, cols, axes=([0, 2], [0, 2])).reshape(W.shape),
            "b": g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype),
        }
        dx = col2im(np.matmul(wmat.T, gf), cache["x_shape"], spec.kernel, spec.stride, spec.padding)
        return dx, grads
    if k == "convT2d":
        n, c, h, w = cache["x_shape"]
        gcols, _, _ = im2col(g, spec.kernel, spec.stride, spec.padding)
        W = state.params["W"]
        wmat = W.reshape(c, -1)
        grads = {
            "W": np.tensordot(cache["xf"], gcols, axes=([0, 2], [0, 2])).reshape(W.shape),
            "b": g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype),
        }
        dx = np.matmul(wmat, gcols).reshape(n, c, h, w)
        return dx, grads
    if k in ("batchnorm2d", "batchnorm1d"):
        if cache.get("mode") == "eval":
            raise ValueError(f"{spec.label}: backward needs a train-mode cache (batch stats unavailable)")
        xhat, inv, axes = cache["xhat"], cache["inv"], cache["axes"]
        shape = [1] * g.ndim
        shape[1] = -1
        gamma = state.params["gamma"].astype(np.float64).reshape(shape)
        dgamma = (g * xhat).sum(axis=axes, dtype=np.float64)
        dbeta = g.sum(axis=axes, dtype=np.float64)
        cnt = g.size // g.shape[1]
        dxhat_mean = (dbeta / cnt).reshape(shape)
        dxhat_xhat_mean = (dgamma / cnt).reshape(shape)
        dx = gamma * inv.reshape(shape) * (g - dxhat_mean - xhat * dxhat_xhat_mean)
        return dx.astype(g.dtype), {"gamma": dgamma.astype(g.dtype), "beta": dbeta.astype(g.dtype)}
    if k == "reshape":
        return g.reshape(cache["x_shape"]), {}
    if k == "minibatch_std":
        return _mbstd_backward(cache, g), {}
    if k == "leaky_relu":
        x = cache["x"]
        return np.where(x > 0, g, g * g.dtype.type(spec.negative_slope)), {}
    if k == "relu":
        return np.where(cache["x"] > 0, g, 0).astype(g.dtype), {}
    if k == "tanh":
        y = cache["y"]
        return g * (1 - y * y), {}
    if k == "sigmoid":
        y = cache["y"]
        return g * y * (1 - y), {}
    raise ValueError(k)


def adam_step(spec, state, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place. Returns ``state``."""
    for name, gr in grads.items():
        if not np.all(np.isfinite(gr)):
            raise NonFiniteError(f"{spec.label}: non-finite gradient for {name!r}")
    if not grads:
        return state
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, gr in grads.items():
        w = state.params[name]
        m = state.m[name] = (beta1 * state.m[name] + (1 - beta1) * gr).astype(w.dtype)
        v = state.v[name] = (beta2 * state.v[name] + (1 - beta2) * gr * gr).astype(w.dtype)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        state.params[name] = (w - step).astype(w.dtype)
    return state


# -- networks ---------------------------------------------------------------

class Network:
    """An ordered stack of layers with their states."""

    def __init__(self, specs, states=None, meta=None):
        self.specs = list(specs)
        self.states = list(states) if states is not None else [LayerState() for _ in self.specs]
        self.meta = dict(meta or {})

    @classmethod
    def build(cls, specs, seed, std=0.02, meta=None):
        rng = np.random.default_rng(seed)
        return cls(specs, [init_state(s, rng, std) for s in specs], meta)

    def forward(self, x, mode="train"):
        caches = []
        for spec, st in zip(self.specs, self.states):
            x, c = forward(spec, st, x, mode)
            caches.append(c)
        return x, caches

    def __call__(self, x, mode="eval"):
        return self.forward(x, mode)[0]

    def backward(self, caches, upstream):
        grads = [None] * len(self.specs)
        g = upstream
        for i in range(len(self.specs) - 1, -1, -1):
            g, grads[i] = backward(self.specs[i], self.states[i], caches[i], g)
        return g, grads

    def adam_step(self, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        for spec, st, gr in zip(self.specs, self.states, grads):
            adam_step(spec, st, gr, lr, beta1, beta2, eps)

    def arrays(self, include_buffers=True):
        """(layer index, name, array) triples in canonical order."""
        out = []
        for i, st in enumerate(self.states):
            for name in sorted(st.params):
                out.append((i, name, st.params[name]))
            if include_buffers:
                for name in sorted(st.buffers):
                    out.append((i, "buf:" + name, st.buffers[name]))
        return out

    def copy(self):
        return Network(self.specs, copy.deepcopy(self.states), self.meta)

    def zero_(self):
        for st in self.states:
            for name in st.params:
                st.params[name][...] = 0
        return self

    def n_params(self):
        return sum(a.size for _, _, a in self.arrays(include_buffers=False))

    def astype(self, dtype):
        net = self.copy()
        for st in net.states:
            for d in (st.params, st.buffers, st.m, st.v):
                for key in d:
                    d[key] = d[key].astype(dtype)
        return net


# -- gradient check ---------------------------------------------------------

@dataclass
class GradCheckReport:
    layer: str
    max_rel_err: dict
    tol: float

    @property
    def passed(self):
        return all(e < self.tol for e in self.max_rel_err.values())

    @property
    def worst(self):
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0


def rel_err(a, n):
    a = np.asarray(a, np.float64)
    n = np.asarray(n, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def default_input_shape(spec, batch=4):
    k = spec.kind
    if k == "dense":
        return (batch, spec.in_features)
    if k == "conv2d":
        return (batch, spec.in_channels, 5, 5)
    if k == "convT2d":
        return (batch, spec.in_channels, 3, 3)
    if k == "batchnorm2d":
        return (batch, spec.channels, 3, 3)
    if k == "batchnorm1d":
        return (batch, spec.channels)
    if k == "reshape":
        return (batch, int(np.prod(spec.shape)))
    if k == "minibatch_std":
        return (2 * spec.group, 3, 3, 3)
    return (batch, 3, 4, 4)


def gradient_check(spec, random_seed=0, tol=1e-3, input_shape=None, h=1e-3, scale=0.1):
    """Compare analytic gradients with central finite differences.

    The check runs in float64. The scalar objective is ``sum(out * r)`` for a
    fixed random ``r``, so every output element contributes. Pointwise
    nonlinearities get inputs pushed at least ``2h`` away from the kink.
    """
    rng = np.random.default_rng(random_seed)
    state = init_state(spec, rng, std=1.0)
    for d in (state.params, state.buffers):
        for key in d:
            d[key] = d[key].astype(np.float64)
    if spec.kind in ("batchnorm2d", "batchnorm1d"):
        state.params["gamma"] = 1.0 + 0.1 * rng.standard_normal(spec.channels)
        state.params["beta"] = 0.1 * rng.standard_normal(spec.channels)
    shape = input_shape or default_input_shape(spec)
    x = rng.standard_normal(shape) * scale
    if spec.kind in ("relu", "leaky_relu"):
        x = np.where(np.abs(x) < 4 * h, np.sign(x + 1e-12) * (4 * h + np.abs(x)), x)
    mode = "frozen"
    out, cache = forward(spec, state, x, mode)
    r = rng.standard_normal(out.shape)
    dx, grads = backward(spec, state, cache, r)

    def objective():
        o, _ = forward(spec, state, x, mode)
        return float(np.sum(o * r, dtype=np.float64))

    def numeric(arr):
        num = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            fp = objective()
            arr[idx] = orig - h
            fm = objective()
            arr[idx] = orig
            num[idx] = (fp - fm) / (2 * h)
        return num

    errors = {"input": float(rel_err(dx, numeric(x)).max())}
    for name, arr in state.params.items():
        errors[name] = float(rel_err(grads[name], numeric(arr)).max())
    return GradCheckReport(spec.label, errors, tol)


def standard_gradcheck_specs():
    """One small spec per layer kind, used by the CLI and the test-suite."""
    return [
        LayerSpec("dense", name="dense 4->3", in_features=4, out_features=3),
        LayerSpec("conv2d", name="conv2d k3 s1 p1", in_channels=2, out_channels=3, kernel=3, stride=1, padding=1),
        LayerSpec("conv2d", name="conv2d k4 s2 p1", in_channels=2, out_channels=3, kernel=4, stride=2, padding=1),
        LayerSpec("convT2d", name="convT2d k4 s2 p1", in_channels=3, out_channels=2, kernel=4, stride=2, padding=1),
        LayerSpec("batchnorm2d", name="batchnorm2d", channels=3),
        LayerSpec("batchnorm1d", name="batchnorm1d", channels=5),
        LayerSpec("reshape", name="reshape", shape=(2, 2, 2)),
        LayerSpec("minibatch_std", name="minibatch_std", group=4),
        LayerSpec("leaky_relu", name="leaky_relu"),
        LayerSpec("relu", name="relu"),
        LayerSpec("tanh", name="tanh"),
        LayerSpec("sigmoid", name="sigmoid"),
    ]


# -- checkpoint I/O ---------------------------------------------------------

def _header():
    return WEIGHTS_MAGIC + struct.pack("<II", WEIGHTS_VERSION, 0)


def _write_blob(path, arrays):
    with open(path, "wb") as fh:
        fh.write(_header())
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_blob(path, shapes):
    raw = Path(path).read_bytes()
    if raw[:8] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, _ = struct.unpack("<II", raw[8:16])
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    off = 16
    out = []
    for shape in shapes:
        size = int(np.prod(shape))
        if off + 4 * size > len(raw):
            raise ValueError(f"{path}: truncated, layout mismatch")
        out.append(np.frombuffer(raw, "<f4", size, off).reshape(shape).astype(DTYPE))
        off += 4 * size
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes, layout mismatch")
    return out


def write_weights(path, *nets):
    """Little-endian float32 blob: 16-byte magic+version header, then every
    parameter and running buffer of each net in layer order."""
    _write_blob(path, [a for net in nets for _, _, a in net.arrays()])


def read_weights(path, *nets):
    """Fill ``nets`` (whose current shapes define the layout) from a blob."""
    slots = [(net, i, name, a.shape) for net in nets for i, name, a in net.arrays()]
    arrays = _read_blob(path, [s[3] for s in slots])
    for (net, i, name, _), arr in zip(slots, arrays):
        st = net.states[i]
        if name.startswith("buf:"):
            st.buffers[name[4:]] = arr
        else:
            st.params[name] = arr
    return nets


def write_optimizer(path, *nets):
    arrays = []
    for net in nets:
        for st in net.states:
            for name in sorted(st.params):
                arrays += [st.m[name], st.v[name]]
    _write_blob(path, arrays)


def read_optimizer(path, *nets):
    slots = []
    for net in nets:
        for st in net.states:
            for name in sorted(st.params):
                slots += [(st.m, name, st.params[name].shape), (st.v, name, st.params[name].shape)]
    for (d, name, _), arr in zip(slots, _read_blob(path, [s[2] for s in slots])):
        d[name] = arr


def arch_dict(net):
    return {
        "layers": [s.to_dict() for s in net.specs],
        "shapes": [[i, n, list(a.shape)] for i, n, a in net.arrays()],
        "adam_t": [st.t for st in net.states],
        "meta": net.meta,
    }


def net_from_arch(d):
    net = Network.build([LayerSpec.from_dict(x) for x in d["layers"]], seed=0, meta=d.get("meta"))
    for st, t in zip(net.states, d.get("adam_t", [])):
        st.t = t
    return net


def save_network(directory, net, extra=None):
    """Single-network checkpoint: ``arch.json`` + ``weights.bin`` + ``adam.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arch = {"networks": {"net": arch_dict(net)}}
    arch.update(extra or {})
    (directory / "arch.json").write_text(json.dumps(arch, indent=2, sort_keys=True))
    write_weights(directory / "weights.bin", net)
    write_optimizer(directory / "adam.bin", net)


def load_network(directory):
    directory = Path(directory)
    arch = json.loads((directory / "arch.json").read_text())
    net = net_from_arch(arch["networks"]["net"])
    read_weights(directory / "weights.bin", net)
    if (directory / "adam.bin").exists():
        read_optimizer(directory / "adam.bin", net)
    return net


def thread_limit():
    """Worker cap from ``DEPTHFORGE_THREADS`` (defaults to the CPU count)."""
    val = os.environ.get("DEPTHFORGE_THREADS")
    if val:
        return max(1, int(val))
    return os.cpu_count() or 1
