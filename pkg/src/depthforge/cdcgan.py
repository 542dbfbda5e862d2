"""Emotion-conditioned DCGAN on top of :mod:`depthforge.nncore`.

The generator sees ``concat(z, onehot(y))``; the discriminator sees the image
with ``onehot(y)`` broadcast as extra constant channels. Training uses the
non-saturating generator loss and, when enabled, the EMA-teacher consistency
terms from :mod:`depthforge.distill`.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import CLASSES
from .distill import KdConfig, ema_update, l2_consistency, make_teacher
from .nncore import (
    LayerSpec,
    Network,
    NonFiniteError,
    arch_dict,
    net_from_arch,
    read_optimizer,
    read_weights,
    write_optimizer,
    write_weights,
)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "d_loss", "g_adv", "kd_g", "kd_d")
DIVERGENCE_LIMIT = 1e4


@dataclass
class GanConfig:
    latent_dim: int = 256
    image_size: int = 64
    batch: int = 32
    epochs: int = 200
    lr_g: float = 8e-5
    lr_d: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    base_channels: int = 8
    n_classes: int = len(CLASSES)
    seed: int = 0

    def __post_init__(self):
        s = self.image_size
        if s < 32 or s & (s - 1):
            raise ValueError(f"gan.image_size must be a power of two >= 32, got {s}")
        if self.lr_g <= 0:
            raise ValueError(f"gan.lr_g must be > 0, got {self.lr_g}")
        if self.lr_d <= 0:
            raise ValueError(f"gan.lr_d must be > 0, got {self.lr_d}")
        if self.latent_dim < 1 or self.batch < 1 or self.epochs < 0 or self.base_channels < 1:
            raise ValueError("gan.latent_dim, batch, base_channels must be >= 1 and epochs >= 0")


@dataclass
class TrainEvent:
    epoch: int
    d_loss: float
    g_adv_loss: float
    kd_g_loss: float = 0.0
    kd_d_loss: float = 0.0

    def row(self):
        return [self.epoch, self.d_loss, self.g_adv_loss, self.kd_g_loss, self.kd_d_loss]


def onehot(y, n_classes):
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got {y}")
    out = np.zeros((y.size, n_classes), np.float32)
    out[np.arange(y.size), y] = 1.0
    return out


def disc_input(images, y_onehot):
    """Stack the label planes behind the image channel."""
    n, _, h, w = images.shape
    planes = np.broadcast_to(y_onehot[:, :, None, None], (n, y_onehot.shape[1], h, w))
    return np.concatenate([images, planes], axis=1).astype(np.float32)


def _n_up(image_size):
    return int(round(math.log2(image_size // 4)))


def build_generator(config, seed=None):
    cfg = config
    n_up = _n_up(cfg.image_size)
    top = cfg.base_channels * 8
    chans = [max(top >> i, 4) for i in range(n_up)]
    specs = [
        LayerSpec("dense", "g_fc", in_features=cfg.latent_dim + cfg.n_classes, out_features=16 * chans[0]),
        LayerSpec("reshape", "g_reshape", shape=(chans[0], 4, 4)),
        LayerSpec("batchnorm2d", "g_bn0", channels=chans[0]),
        LayerSpec("relu", "g_relu0"),
    ]
    for i in range(n_up):
        out = chans[i + 1] if i + 1 < n_up else 1
        specs.append(LayerSpec("convT2d", f"g_up{i + 1}", in_channels=chans[i], out_channels=out,
                               kernel=4, stride=2, padding=1))
        if i + 1 < n_up:
            specs.append(LayerSpec("batchnorm2d", f"g_bn{i + 1}", channels=out))
            specs.append(LayerSpec("relu", f"g_relu{i + 1}"))
    specs.append(LayerSpec("tanh", "g_tanh"))
    meta = {"role": "generator", "latent_dim": cfg.latent_dim, "n_classes": cfg.n_classes,
            "image_size": cfg.image_size}
    return Network.build(specs, cfg.seed if seed is None else seed, meta=meta)


def build_discriminator(config, seed=None):
    cfg = config
    n_down = _n_up(cfg.image_size)
    chans = [min(cfg.base_channels << i, cfg.base_channels * 8) for i in range(n_down)]
    specs = []
    cin = 1 + cfg.n_classes
    for i, c in enumerate(chans):
        specs.append(LayerSpec("conv2d", f"d_conv{i + 1}", in_channels=cin, out_channels=c,
                               kernel=4, stride=2, padding=1))
        specs.append(LayerSpec("leaky_relu", f"d_lrelu{i + 1}", negative_slope=0.2))
        cin = c
    # per-group spread of the 4x4 features as an extra channel, against mode collapse
    specs.append(LayerSpec("minibatch_std", "d_mbstd", group=4))
    cin += 1
    specs.append(LayerSpec("reshape", "d_flatten", shape=(16 * cin,)))
    specs.append(LayerSpec("dense", "d_logit", in_features=16 * cin, out_features=1))
    meta = {"role": "discriminator", "n_classes": cfg.n_classes, "image_size": cfg.image_size}
    return Network.build(specs, (cfg.seed if seed is None else seed) + 1, meta=meta)


def _gen_input(gen, z, y):
    latent_dim = gen.meta["latent_dim"]
    z = np.atleast_2d(np.asarray(z, dtype=np.float32))
    if z.shape[1] != latent_dim:
        raise ValueError(f"latent vector has length {z.shape[1]}, generator expects {latent_dim}")
    y = np.broadcast_to(np.atleast_1d(y), (z.shape[0],))
    return np.concatenate([z, onehot(y, gen.meta["n_classes"])], axis=1)


def generate(gen, z, y, batch=256):
    """Images in [-1, 1] for latent(s) ``z`` and label(s) ``y``.

    Runs the generator in eval mode, so the result depends only on
    ``(gen, z, y)``. A 1-D ``z`` gives one (H, W) image, a 2-D ``z`` gives
    (n, H, W).
    """
    single = np.ndim(z) == 1
    inp = _gen_input(gen, z, y)
    outs = [gen(inp[i:i + batch], mode="eval") for i in range(0, len(inp), batch)]
    imgs = np.concatenate(outs, axis=0)[:, 0]
    return imgs[0] if single else imgs


# -- losses -----------------------------------------------------------------

def softplus(x):
    x = x.astype(np.float64)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = x.astype(np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bce_real(logits):
    """mean(-log D) and its gradient w.r.t. the logits."""
    n = logits.size
    return float(np.mean(softplus(-logits))), ((sigmoid(logits) - 1.0) / n).astype(np.float32)


def bce_fake(logits):
    """mean(-log(1 - D)) and its gradient w.r.t. the logits."""
    n = logits.size
    return float(np.mean(softplus(logits))), (sigmoid(logits) / n).astype(np.float32)


# -- training ---------------------------------------------------------------

@dataclass
class GanState:
    """Students, optional teachers, and the RNG that drives batches and z."""

    config: GanConfig
    kd: KdConfig
    gen: Network
    disc: Network
    teacher_g: Network | None = None
    teacher_d: Network | None = None
    rng: np.random.Generator = field(default=None)
    epoch: int = 0

    @classmethod
    def init(cls, config, kd):
        gen = build_generator(config)
        disc = build_discriminator(config)
        tg = make_teacher(gen) if kd.enabled else None
        td = make_teacher(disc) if kd.enabled else None
        return cls(config, kd, gen, disc, tg, td, np.random.default_rng(config.seed + 2))


def _check_finite(values, context):
    for name, v in values.items():
        if not np.isfinite(v):
            raise NonFiniteError(f"non-finite {name} at {context}")
        if abs(v) > DIVERGENCE_LIMIT:
            raise NonFiniteError(f"{name}={v:.3g} exceeds divergence limit at {context}")


def gan_train_step(gen_s, disc_s, teacher_g, teacher_d, real_batch, labels, config, kd_config, z,
                   context="step"):
    """One discriminator update, one generator update, then the EMA update.

    ``z`` is the latent batch for the fake half. Teachers may be ``None`` when
    distillation is off. Returns a :class:`TrainEvent` with ``epoch=-1``.
    """
    if len(real_batch) == 0:
        raise ValueError("empty batch")
    cfg, kd = config, kd_config
    y1h = onehot(labels, cfg.n_classes)
    g_in = np.concatenate([z.astype(np.float32), y1h], axis=1)
    fake, g_caches = gen_s.forward(g_in, mode="train")

    # discriminator sees real and fake in one pass; the KD term covers both
    n = len(real_batch)
    both_in = np.concatenate([disc_input(real_batch, y1h), disc_input(fake, y1h)])
    logits, c_d = disc_s.forward(both_in, mode="train")
    loss_r, g_r = bce_real(logits[:n])
    loss_f, g_f = bce_fake(logits[n:])
    d_loss = loss_r + loss_f
    g_logits = np.concatenate([g_r, g_f])
    kd_d = 0.0
    if teacher_d is not None and kd.lambda_kd_d > 0:
        t_logits, _ = teacher_d.forward(both_in, mode="frozen")
        kd_d, g_kd = l2_consistency(t_logits, logits)
        g_logits = g_logits + kd.lambda_kd_d * g_kd
    _, d_grads = disc_s.backward(c_d, g_logits)
    _check_finite({"d_loss": d_loss, "kd_d": kd_d}, context)
    disc_s.adam_step(d_grads, cfg.lr_d, cfg.beta1, cfg.beta2)

    # generator: same mixed batch through the updated D, gradient from the fake half
    l_all, c_gen = disc_s.forward(both_in, mode="frozen")
    g_adv, g_logit = bce_real(l_all[n:])
    upstream = np.concatenate([np.zeros_like(g_logit), g_logit])
    d_in, _ = disc_s.backward(c_gen, upstream)
    g_img = d_in[n:, :1]
    kd_g = 0.0
    if teacher_g is not None and kd.lambda_kd_g > 0:
        t_img, _ = teacher_g.forward(g_in, mode="frozen")
        kd_g, g_kd = l2_consistency(t_img, fake)
        g_img = g_img + kd.lambda_kd_g * g_kd
    _, g_grads = gen_s.backward(g_caches, g_img)
    _check_finite({"g_adv": g_adv, "kd_g": kd_g}, context)
    gen_s.adam_step(g_grads, cfg.lr_g, cfg.beta1, cfg.beta2)

    if teacher_g is not None:
        ema_update(teacher_g, gen_s, kd.tau)
    if teacher_d is not None:
        ema_update(teacher_d, disc_s, kd.tau)
    return TrainEvent(-1, d_loss, g_adv, kd_g, kd_d)


def train_epoch(state, images, labels):
    """One pass over shuffled full batches. Returns the epoch-mean event."""
    cfg = state.config
    n = len(images)
    order = state.rng.permutation(n)
    n_batches = max(n // cfg.batch, 1)
    totals = np.zeros(4)
    for b in range(n_batches):
        idx = order[b * cfg.batch:(b + 1) * cfg.batch]
        z = state.rng.standard_normal((len(idx), cfg.latent_dim)).astype(np.float32)
        ev = gan_train_step(state.gen, state.disc, state.teacher_g, state.teacher_d, images[idx], labels[idx],
                            cfg, state.kd, z, context=f"epoch {state.epoch + 1}, step {b + 1}")
        totals += ev.row()[1:]
    state.epoch += 1
    m = totals / n_batches
    return TrainEvent(state.epoch, *[float(v) for v in m])


def _check_dataset(images, labels, cfg):
    if images.ndim != 4 or images.shape[1:] != (1, cfg.image_size, cfg.image_size):
        raise ValueError(f"expected images of shape (N, 1, {cfg.image_size}, {cfg.image_size}), got {images.shape}")
    counts = np.bincount(labels, minlength=cfg.n_classes)
    if np.any(counts < cfg.batch):
        raise ValueError(f"every class needs >= batch={cfg.batch} samples, got counts {counts.tolist()}")


def train(images, labels, config, kd_config, out_dir, resume=None, progress=None):
    """Train (or continue training) and write ``checkpoint/`` plus ``losses.csv``.

    ``images`` are (N, 1, S, S) float32 in [-1, 1]. With ``resume`` pointing
    to a checkpoint, training continues from its epoch up to
    ``config.epochs`` and rows are appended to the existing CSV.
    """
    cfg = config
    labels = np.asarray(labels, dtype=np.int64)
    _check_dataset(images, labels, cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "losses.csv"
    if resume is not None:
        state = load_checkpoint(resume)
        state.config = cfg
        state.kd = kd_config
    else:
        state = GanState.init(cfg, kd_config)
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOSS_COLUMNS)
    events = []
    while state.epoch < cfg.epochs:
        ev = train_epoch(state, images, labels)
        events.append(ev)
        with open(csv_path, "a", newline="") as fh:
            csv.writer(fh).writerow([ev.epoch] + [repr(float(v)) for v in ev.row()[1:]])
        if progress:
            progress(ev)
        log.debug("epoch %d d=%.4f g=%.4f kd_g=%.5f kd_d=%.5f", *ev.row())
    save_checkpoint(out_dir / "checkpoint", state)
    return state, events


def read_losses(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in LOSS_COLUMNS}


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(directory, state):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arch = {
        "networks": {"generator": arch_dict(state.gen), "discriminator": arch_dict(state.disc)},
        "config": asdict(state.config),
        "kd": asdict(state.kd),
        "epoch": state.epoch,
        "has_teachers": state.teacher_g is not None,
        "rng_state": state.rng.bit_generator.state,
    }
    (directory / "arch.json").write_text(json.dumps(arch, indent=2, sort_keys=True))
    write_weights(directory / "weights.bin", state.gen, state.disc)
    write_optimizer(directory / "adam.bin", state.gen, state.disc)
    if state.teacher_g is not None:
        write_weights(directory / "teacher_g.bin", state.teacher_g)
        write_weights(directory / "teacher_d.bin", state.teacher_d)


def load_checkpoint(directory):
    directory = Path(directory)
    arch = json.loads((directory / "arch.json").read_text())
    gen = net_from_arch(arch["networks"]["generator"])
    disc = net_from_arch(arch["networks"]["discriminator"])
    read_weights(directory / "weights.bin", gen, disc)
    read_optimizer(directory / "adam.bin", gen, disc)
    tg = td = None
    if arch.get("has_teachers"):
        tg = net_from_arch(arch["networks"]["generator"])
        td = net_from_arch(arch["networks"]["discriminator"])
        read_weights(directory / "teacher_g.bin", tg)
        read_weights(directory / "teacher_d.bin", td)
    rng = np.random.default_rng()
    rng.bit_generator.state = arch["rng_state"]
    return GanState(GanConfig(**arch["config"]), KdConfig(**arch["kd"]), gen, disc, tg, td, rng, arch["epoch"])


def sampling_generator(state_or_dir, use_student=False):
    """Generator used for sampling: the EMA teacher when one exists."""
    state = state_or_dir if isinstance(state_or_dir, GanState) else load_checkpoint(state_or_dir)
    if use_student or state.teacher_g is None:
        return state.gen
    return state.teacher_g
