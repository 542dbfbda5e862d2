"""Classical comparison generators: a per-class KDE sampler and a PCA+GMM
sampler. Both work on images in [0, 1] and emit images in [0, 1]."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .dataio import save_image

VAR_FLOOR = 1e-8


@dataclass
class BaselineConfig:
    kde_bandwidth: float = 0.05
    gmm_k: int = 10
    gmm_d: int = 32
    gmm_max_iter: int = 200
    gmm_tol: float = 1e-4

    def __post_init__(self):
        if self.kde_bandwidth < 0:
            raise ValueError("baselines.kde_bandwidth must be >= 0")
        if self.gmm_k < 1 or self.gmm_d < 1 or self.gmm_max_iter < 1:
            raise ValueError("baselines.gmm_k, gmm_d and gmm_max_iter must be >= 1")


def _class_indices(labels, y):
    idx = np.flatnonzero(np.asarray(labels) == y)
    if idx.size == 0:
        raise ValueError(f"class {y} has no training images")
    return idx


# --------------------------------------------------------------------- KDE


@dataclass
class KdeSampler:
    images: np.ndarray          # (n, H, W) in [0, 1]
    labels: np.ndarray
    bandwidth: float = 0.05

    def __post_init__(self):
        if self.bandwidth < 0:
            raise ValueError("bandwidth must be >= 0")
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels)


def kde_fit(images, labels, bandwidth=0.05):
    return KdeSampler(images, labels, bandwidth)


def kde_sample(sampler, y, n, seed=0):
    """Pick training images of class ``y`` uniformly and add N(0, h^2)
    pixel noise, clamped to [0, 1]."""
    idx = _class_indices(sampler.labels, y)
    rng = np.random.default_rng([seed, int(y)])
    picks = sampler.images[idx[rng.integers(0, idx.size, size=n)]]
    if sampler.bandwidth == 0:
        return picks.copy()
    noisy = picks + rng.normal(0.0, sampler.bandwidth, size=picks.shape)
    return np.clip(noisy, 0.0, 1.0).astype(picks.dtype)


# --------------------------------------------------------------------- GMM


@dataclass
class DiagGmm:
    weights: np.ndarray         # (k,)
    means: np.ndarray           # (k, d)
    variances: np.ndarray       # (k, d)
    log_likelihood: list = field(default_factory=list)  # mean per-sample, per iteration

    def log_prob_components(self, Z):
        """(n, k) matrix of log w_j + log N(z | mu_j, diag var_j)."""
        var = self.variances
        diff2 = (Z[:, None, :] - self.means[None]) ** 2
        ll = -0.5 * (np.log(2 * np.pi * var)[None] + diff2 / var[None]).sum(axis=2)
        return ll + np.log(self.weights)[None]

    def score(self, Z):
        return float(logsumexp(self.log_prob_components(Z), axis=1).mean())


def em_diag_gmm(Z, k, seed=0, max_iter=200, tol=1e-4):
    """Fit a diagonal-covariance GMM by EM.

    Means start at ``k`` distinct data rows; variances start at the data
    variance. Stops when the mean log-likelihood gain drops below ``tol``.
    Variances are floored at 1e-8.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n, d = Z.shape
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    rng = np.random.default_rng(seed)
    # seed from distinct rows when there are enough, so duplicates cannot
    # start two components at the same point
    rows = np.unique(Z, axis=0)
    pool = rows if len(rows) >= k else Z
    means = pool[rng.choice(len(pool), size=k, replace=False)].copy()
    variances = np.tile(np.maximum(Z.var(axis=0), VAR_FLOOR), (k, 1))
    gmm = DiagGmm(np.full(k, 1.0 / k), means, variances)
    prev = -np.inf
    for _ in range(max_iter):
        lp = gmm.log_prob_components(Z)
        norm = logsumexp(lp, axis=1, keepdims=True)
        cur = float(norm.mean())
        gmm.log_likelihood.append(cur)
        if cur - prev < tol:
            break
        prev = cur
        resp = np.exp(lp - norm)
        nk = resp.sum(axis=0) + 1e-12
        gmm.weights = nk / nk.sum()
        gmm.means = (resp.T @ Z) / nk[:, None]
        ex2 = (resp.T @ (Z * Z)) / nk[:, None]
        gmm.variances = np.maximum(ex2 - gmm.means ** 2, VAR_FLOOR)
    return gmm


@dataclass
class GmmSampler:
    shape: tuple
    mean: dict = field(default_factory=dict)      # class -> (P,) pixel mean
    basis: dict = field(default_factory=dict)     # class -> (d, P) orthonormal rows
    gmm: dict = field(default_factory=dict)       # class -> DiagGmm


def pca_basis(X, d):
    """Mean and top-``d`` orthonormal principal directions of rows of X."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mu, full_matrices=False)
    return mu, vt[: min(d, vt.shape[0])]


def gmm_fit(images, labels, k=10, d=32, seed=0, max_iter=200, tol=1e-4):
    """Per-class PCA to ``d`` dims followed by a ``k``-component diagonal GMM."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    sampler = GmmSampler(images.shape[1:])
    for y in np.unique(labels):
        X = images[labels == y].reshape(int((labels == y).sum()), -1)
        mu, basis = pca_basis(X, d)
        Z = (X - mu) @ basis.T
        sampler.mean[int(y)] = mu
        sampler.basis[int(y)] = basis
        sampler.gmm[int(y)] = em_diag_gmm(Z, k, seed=seed + int(y), max_iter=max_iter, tol=tol)
    return sampler


def gmm_sample_latent(sampler, y, n, seed=0):
    if int(y) not in sampler.gmm:
        raise ValueError(f"class {y} has no fitted model")
    g = sampler.gmm[int(y)]
    rng = np.random.default_rng([seed, int(y)])
    comp = rng.choice(len(g.weights), size=n, p=g.weights)
    return g.means[comp] + rng.standard_normal((n, g.means.shape[1])) * np.sqrt(g.variances[comp])


def gmm_sample(sampler, y, n, seed=0, clamp=True):
    """Draw a component by weight, sample in PCA space, map back to pixels."""
    Z = gmm_sample_latent(sampler, y, n, seed)
    X = sampler.mean[int(y)] + Z @ sampler.basis[int(y)]
    if clamp:
        X = np.clip(X, 0.0, 1.0)
    return X.reshape((n,) + tuple(sampler.shape)).astype(np.float32)


# ------------------------------------------------------------------ output


def write_samples(out_dir, images_by_class, class_names):
    """Write ``<class>_<index>.png`` files, the same layout the GAN uses."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for y, imgs in images_by_class.items():
        for i, im in enumerate(imgs):
            p = out / f"{class_names[y]}_{i:04d}.png"
            save_image(p, im, 8)
            paths.append(p)
    return paths
