"""Search the latent space of the demo checkpoint with the genetic algorithm.

Run after 02_train_distilled_gan.py:  python3 demos/03_evolve_latents.py
"""
from pathlib import Path

import numpy as np

from depthforge import CLASSES, galatent
from depthforge.cdcgan import sampling_generator
from depthforge.galatent import FitnessWeights, GaConfig

OUT = Path("demo_out/gan")
gen = sampling_generator(OUT / "checkpoint")
weights = FitnessWeights(alpha=1.0, beta=1.0)        # fitness = mean + std of the [0, 1] image

# Paper-sized population, fewer generations to keep the demo short.
cfg = GaConfig(pop_size=20, generations=30, seed=0)
bank, histories = galatent.evolve_all_classes(gen, cfg, weights, n_outputs_per_class=20,
                                              out_dir=OUT, class_names=list(CLASSES))

rng = np.random.default_rng(1)
for c, name in enumerate(CLASSES):
    hist = histories[c]
    random_fit = np.mean([galatent.fitness(gen, c, z, weights) for z in rng.standard_normal((20, gen.meta["latent_dim"]))])
    evolved_fit = np.mean([ind.fitness for ind in bank[c]])
    print(f"{name:<8} best {hist[0][1]:.4f} -> {hist[-1][1]:.4f} over {len(hist)} generations; "
          f"top-20 mean {evolved_fit:.4f} vs random {random_fit:.4f}")
print("latent banks and ga_history_<class>.csv written to", OUT)
