"""Train a small conditional GAN with an EMA teacher and look at the losses.

Run from the repository root:  python3 demos/02_train_distilled_gan.py
This is a shrunken configuration (32x32, 60 epochs) that finishes in a few
minutes; the full desk run uses 64x64 and 200 epochs.
"""
from pathlib import Path

import numpy as np

from depthforge.cdcgan import GanConfig, generate, read_losses, sampling_generator, train
from depthforge.dataio import FixtureConfig, fixture_arrays, normalize, save_image
from depthforge.distill import KdConfig

OUT = Path("demo_out/gan")
OUT.mkdir(parents=True, exist_ok=True)

imgs, labels = fixture_arrays(FixtureConfig(n_per_class=400, image_size=32))
x = normalize(imgs)[:, None].astype(np.float32)      # tanh range, NCHW

cfg = GanConfig(latent_dim=64, image_size=32, epochs=60, base_channels=8)
kd = KdConfig()                                      # tau 0.994, both distillation terms on
state, events = train(x, labels, cfg, kd, OUT)

# losses.csv has one row per epoch. The distillation term kd_g measures how
# far the student generator has drifted from its moving-average teacher.
losses = read_losses(OUT / "losses.csv")
for e in (0, 19, 39, 59):
    print(f"epoch {int(losses['epoch'][e]):>3}: d {losses['d_loss'][e]:.3f}  g_adv {losses['g_adv'][e]:.3f}  "
          f"kd_g {losses['kd_g'][e]:.5f}  kd_d {losses['kd_d'][e]:.5f}")

# Samples come from the teacher, which averages out step-to-step jitter.
gen = sampling_generator(state)
z = np.random.default_rng(0).standard_normal((12, cfg.latent_dim))
out = (generate(gen, z, np.repeat([0, 1, 2], 4)) + 1) / 2
sheet = np.concatenate([np.concatenate(list(out[r * 4:(r + 1) * 4]), axis=1) for r in range(3)], axis=0)
save_image(OUT / "samples.png", sheet, 8)
print("checkpoint in", OUT / "checkpoint", "and samples in", OUT / "samples.png")
