"""Genetic search over generator latents.

Fitness of a latent is ``alpha * mean + beta * std`` of the generated image
mapped to [0, 1]. ``gen`` is either a generator :class:`~depthforge.nncore.Network`
(tanh output, mapped from [-1, 1]) or any callable ``gen(Z, y)`` returning
[0, 1] images and exposing a ``latent_dim`` attribute. The GA uses tournament selection, uniform crossover,
sparse Gaussian mutation and elitism, all on one seeded RNG stream.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cdcgan import generate
from .nncore import Network

GENE_BOUND = 3.0


@dataclass
class FitnessWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValueError("fitness weights must be finite")


@dataclass
class GaConfig:
    pop_size: int = 20
    generations: int = 100
    p_crossover: float = 0.8
    p_mutation: float = 0.2
    tournament_k: int = 3
    elitism: int = 1
    mutation_sigma: float = 0.25
    per_gene_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("p_crossover", "p_mutation", "per_gene_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"ga.{name} must lie in [0, 1], got {v}")
        if self.pop_size < 2:
            raise ValueError("ga.pop_size must be >= 2")
        if self.generations < 0 or self.tournament_k < 1 or not 0 <= self.elitism <= self.pop_size:
            raise ValueError("ga.generations >= 0, tournament_k >= 1, 0 <= elitism <= pop_size required")


@dataclass
class Individual:
    genes: np.ndarray
    fitness: float | None = None


@dataclass
class GaResult:
    best: Individual
    history: list = field(default_factory=list)   # (generation, best, mean)
    archive: list = field(default_factory=list)   # every evaluated Individual


def init_population(config, latent_dim, rng=None):
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    genes = np.clip(rng.standard_normal((config.pop_size, latent_dim)), -GENE_BOUND, GENE_BOUND)
    return [Individual(g) for g in genes]


def image_fitness(image01, weights):
    """alpha * mean + beta * population std, accumulated in float64."""
    x = np.asarray(image01, dtype=np.float64)
    return float(weights.alpha * x.mean() + weights.beta * x.std())


def images01(gen, Z, y):
    """Images in [0, 1] for the latent rows of ``Z`` and class ``y``."""
    if isinstance(gen, Network):
        return (generate(gen, np.asarray(Z, dtype=np.float32), y).astype(np.float64) + 1.0) / 2.0
    return np.asarray(gen(np.asarray(Z, dtype=np.float64), y), dtype=np.float64)


def latent_size(gen):
    return gen.meta["latent_dim"] if isinstance(gen, Network) else int(gen.latent_dim)


def fitness(gen, y, z, weights):
    """Fitness of latent ``z`` for class ``y`` under generator ``gen``."""
    return image_fitness(images01(gen, np.atleast_2d(z), y)[0], weights)


def _batch_fitness(gen, y, genes, weights):
    return [image_fitness(im, weights) for im in images01(gen, genes, y)]


def _tournament(fits, k, rng):
    contenders = rng.choice(len(fits), size=k, replace=k > len(fits))
    return int(contenders[np.argmax(fits[contenders])])


def run_ga(fitness_fn, latent_dim, config, record_archive=False):
    """Run the GA on an arbitrary batch fitness function.

    ``fitness_fn`` maps an (n, latent_dim) gene matrix to n fitness values.
    The elite individuals are copied unchanged, so the best fitness never
    decreases. Returns a :class:`GaResult`; ``history`` has one
    ``(generation, best, mean)`` row per generation after the initial one.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    pop = init_population(cfg, latent_dim, rng)
    genes = np.stack([p.genes for p in pop])
    fits = np.asarray(fitness_fn(genes), dtype=np.float64)
    archive = [Individual(g.copy(), float(f)) for g, f in zip(genes, fits)] if record_archive else []
    history = []
    for gen_i in range(1, cfg.generations + 1):
        elite_idx = np.argsort(-fits, kind="stable")[: cfg.elitism]
        children = [genes[i].copy() for i in elite_idx]
        n_new = cfg.pop_size - len(children)
        offspring = []
        while len(offspring) < n_new:
            a = genes[_tournament(fits, cfg.tournament_k, rng)].copy()
            b = genes[_tournament(fits, cfg.tournament_k, rng)].copy()
            if rng.random() < cfg.p_crossover:
                swap = rng.random(latent_dim) < 0.5
                a[swap], b[swap] = b[swap], a[swap].copy()
            for child in (a, b):
                if rng.random() < cfg.p_mutation:
                    mask = rng.random(latent_dim) < cfg.per_gene_rate
                    child[mask] += rng.normal(0.0, cfg.mutation_sigma, int(mask.sum()))
                np.clip(child, -GENE_BOUND, GENE_BOUND, out=child)
                offspring.append(child)
        offspring = offspring[:n_new]
        new_fits = np.asarray(fitness_fn(np.stack(offspring)), dtype=np.float64) if n_new else np.empty(0)
        genes = np.stack(children + offspring)
        fits = np.concatenate([fits[elite_idx], new_fits])
        if record_archive:
            archive.extend(Individual(g.copy(), float(f)) for g, f in zip(offspring, new_fits))
        history.append((gen_i, float(fits.max()), float(fits.mean())))
    best = int(np.argmax(fits))
    return GaResult(Individual(genes[best].copy(), float(fits[best])), history, archive)


def evolve(gen, y, config, weights=None, record_archive=False):
    """Evolve latents for class ``y``; see :func:`run_ga` for the result."""
    weights = weights or FitnessWeights()
    return run_ga(lambda g: _batch_fitness(gen, y, g, weights), latent_size(gen), config, record_archive)


def top_unique(individuals, k, min_dist=1e-6):
    """Highest-fitness individuals, skipping any within ``min_dist`` (L2) of
    one already taken."""
    ranked = sorted(individuals, key=lambda ind: -ind.fitness)
    chosen = []
    for ind in ranked:
        if len(chosen) == k:
            break
        if all(np.linalg.norm(ind.genes - c.genes) >= min_dist for c in chosen):
            chosen.append(ind)
    return chosen


def evolve_all_classes(gen, config, weights, n_outputs_per_class, n_classes=None, out_dir=None,
                       class_names=None):
    """Evolve every class and collect a bank of top-k unique latents.

    Each class runs independent GA restarts (seeds derived from
    ``config.seed`` and the class index) until the archive holds
    ``n_outputs_per_class`` distinct individuals. Only the first restart's
    history is reported. Writes ``latents_<class>.csv`` and
    ``ga_history_<class>.csv`` when ``out_dir`` is given.
    """
    if n_classes is None:
        n_classes = gen.meta["n_classes"] if isinstance(gen, Network) else int(gen.n_classes)
    if n_outputs_per_class < 1:
        raise ValueError("n_outputs_per_class must be >= 1")
    class_names = class_names or [str(c) for c in range(n_classes)]
    bank, histories = {}, {}
    for c in range(n_classes):
        pool, restart = [], 0
        while True:
            seed = int(np.random.SeedSequence([config.seed, c, restart]).generate_state(1)[0])
            cfg = GaConfig(**{**config.__dict__, "seed": seed})
            res = evolve(gen, c, cfg, weights, record_archive=True)
            if restart == 0:
                histories[c] = res.history
            pool.extend(res.archive)
            restart += 1
            chosen = top_unique(pool, n_outputs_per_class)
            if len(chosen) >= n_outputs_per_class:
                break
        bank[c] = chosen
        if out_dir is not None:
            write_bank(Path(out_dir) / f"latents_{class_names[c]}.csv", chosen)
            write_history(Path(out_dir) / f"ga_history_{class_names[c]}.csv", histories[c])
    return bank, histories


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "best", "mean"])
        for g, b, m in history:
            w.writerow([g, repr(b), repr(m)])


def write_bank(path, individuals):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = len(individuals[0].genes) if individuals else 0
        w.writerow(["fitness"] + [f"z{i}" for i in range(dim)])
        for ind in individuals:
            w.writerow([repr(float(ind.fitness))] + [repr(float(v)) for v in ind.genes])


def read_bank(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        out = []
        for row in reader:
            vals = np.array([float(v) for v in row])
            out.append(Individual(vals[1:], float(vals[0])))
    return out
