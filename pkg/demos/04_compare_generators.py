"""Score GAN samples against the KDE and GMM baselines, then classify.

Run after 03_evolve_latents.py:  python3 demos/04_compare_generators.py
"""
import numpy as np

from depthforge import CLASSES, baselines, classify, features, galatent
from depthforge.cdcgan import generate, sampling_generator
from depthforge.dataio import FixtureConfig, fixture_arrays, split
from depthforge.metrics import MetricConfig, evaluate_report

imgs, labels = fixture_arrays(FixtureConfig(n_per_class=160, image_size=32))
tr, te = split(labels, 0.8, 42)
n = 20

# Three synthetic sets of 20 images per class.
gen = sampling_generator("demo_out/gan/checkpoint")
evolved = [np.stack([i.genes for i in galatent.read_bank(f"demo_out/gan/latents_{c}.csv")])[:n] for c in CLASSES]
gan = np.concatenate([(generate(gen, z, c) + 1) / 2 for c, z in enumerate(evolved)])
kde = baselines.kde_fit(imgs[tr], labels[tr], 0.05)
gmm = baselines.gmm_fit(imgs[tr], labels[tr], k=5, d=16)
sets = {
    "gan+ga": gan,
    "kde": np.concatenate([baselines.kde_sample(kde, c, n, seed=0) for c in range(3)]),
    "gmm": np.concatenate([baselines.gmm_sample(gmm, c, n, seed=0) for c in range(3)]),
}
synth_labels = np.repeat([0, 1, 2], n)

# FID and IS use a PCA embedding of the fused features instead of an
# Inception network; compare the numbers across generators, not to published ones.
cfg = MetricConfig(embedding_k=16, is_gbt_rounds=30)
real_feats, _ = features.extract(imgs)
print(f"{'generator':<8} {'FID':>8} {'IS':>6} {'SSIM':>6} {'PSNR':>6}")
for name, s in sets.items():
    r = evaluate_report(imgs, labels, np.round(s * 255) / 255, synth_labels, cfg, real_feats=real_feats)
    print(f"{name:<8} {r.fid:8.3f} {r.is_mean:6.3f} {r.ssim_mean:6.3f} {r.psnr_db_mean:6.2f}")

# Train on synthetic only and test on held-out real images.
Xs, _ = features.extract(sets["gan+ga"])
model = classify.rf_train(Xs, synth_labels, n_trees=50, seed=0)
rep = classify.evaluate(model.predict(real_feats[te]), labels[te], 3)
print(f"RF trained on GAN samples, tested on real: accuracy {rep.accuracy:.3f}, macro F1 {rep.f1:.3f}")
