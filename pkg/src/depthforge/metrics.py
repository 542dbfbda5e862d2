"""Synthetic-data quality metrics: SSIM, PSNR, a Frechet distance over a
PCA embedding of fused handcrafted features, and an Inception-Score proxy
driven by any probability classifier.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

PSNR_CAP = 99.0


@dataclass
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.data_range <= 0:
            raise ValueError("metrics.data_range must be > 0")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("metrics.window must be a positive odd integer")


# -- SSIM / PSNR ------------------------------------------------------------

def gaussian_window(size, sigma):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter_matrix(n, w):
    """Valid-mode 1-D correlation as an (n - k + 1, n) matrix."""
    k = len(w)
    m = np.zeros((n - k + 1, n))
    for i in range(n - k + 1):
        m[i, i:i + k] = w
    return m


class _Filter:
    """Separable Gaussian filter over the last two axes, valid mode."""

    def __init__(self, shape, cfg):
        h, w = shape
        if h < cfg.window or w < cfg.window:
            raise ValueError(f"image {h}x{w} smaller than the {cfg.window}x{cfg.window} SSIM window")
        g = gaussian_window(cfg.window, cfg.sigma)
        self.rows = _filter_matrix(h, g)
        self.cols = _filter_matrix(w, g).T

    def __call__(self, x):
        if x.ndim == 2:
            return self.rows @ x @ self.cols
        n, h, w = x.shape
        y = (self.rows @ x.transpose(1, 0, 2).reshape(h, n * w)).reshape(-1, n, w)
        y = y.transpose(1, 0, 2).reshape(-1, w) @ self.cols
        return y.reshape(n, -1, self.cols.shape[1])


def _ssim_from_moments(mu_a, mu_b, aa, bb, ab, c1, c2):
    va = aa - mu_a * mu_a
    vb = bb - mu_b * mu_b
    cov = ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2)
    return num / den


def ssim_map(a, b, cfg=None):
    cfg = cfg or SsimConfig()
    a = np.asarray(getattr(a, "pixels", a), dtype=np.float64)
    b = np.asarray(getattr(b, "pixels", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"SSIM needs equal dimensions, got {a.shape} and {b.shape}")
    f = _Filter(a.shape, cfg)
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    return _ssim_from_moments(f(a), f(b), f(a * a), f(b * b), f(a * b), c1, c2)


def ssim(a, b, cfg=None):
    """Mean Gaussian-weighted local SSIM (11x11, sigma 1.5, valid windows)."""
    return float(np.mean(ssim_map(a, b, cfg)))


def psnr(a, b, max_val=1.0):
    """10 log10(max^2 / MSE) in dB; identical images give ``PSNR_CAP``."""
    a = np.asarray(getattr(a, "pixels", a), dtype=np.float64)
    b = np.asarray(getattr(b, "pixels", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"PSNR needs equal dimensions, got {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val ** 2 / mse))


def best_ssim_matches(synth, real, cfg=None):
    """For each synthetic image, the index and SSIM of the real image that
    maximises SSIM. Real-side moments are filtered once and reused."""
    cfg = cfg or SsimConfig()
    synth = np.asarray(synth, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    f = _Filter(real.shape[1:], cfg)
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    mu_r = f(real)
    rr = f(real * real)
    idx = np.empty(len(synth), dtype=np.int64)
    best = np.empty(len(synth))
    for i, s in enumerate(synth):
        mu_s = f(s)
        ss = f(s * s)
        sr = f(real * s)
        vals = _ssim_from_moments(mu_r, mu_s, rr, ss, sr, c1, c2).mean(axis=(1, 2))
        j = int(np.argmax(vals))
        idx[i] = j
        best[i] = vals[j]
    return idx, best


# -- symmetric eigendecomposition and Frechet distance ----------------------

def _round_robin(n):
    """Pairings for one sweep: n - 1 rounds of disjoint (p, q) pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        rounds.append([(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n])
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(A, tol=1e-13, max_sweeps=60):
    """Jacobi eigendecomposition of a symmetric matrix.

    Uses the round-robin ordering: every round annihilates a set of
    disjoint off-diagonal pairs at once, applied as one orthogonal
    similarity transform. Returns ``(eigenvalues, eigenvectors)`` with
    eigenvectors in columns.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"need a square matrix, got {A.shape}")
    A = 0.5 * (A + A.T)
    n = len(A)
    V = np.eye(n)
    scale = np.linalg.norm(A)
    if scale == 0.0 or n == 1:
        return np.diag(A).copy(), V
    rounds = [np.array(r, dtype=np.int64).reshape(-1, 2) for r in _round_robin(n)]
    for _ in range(max_sweeps):
        off = math.sqrt(max(float(np.sum(A * A) - np.sum(np.diag(A) ** 2)), 0.0))
        if off <= tol * scale:
            break
        for pairs in rounds:
            p, q = pairs[:, 0], pairs[:, 1]
            apq = A[p, q]
            keep = np.abs(apq) > 1e-300 * scale
            if not keep.any():
                continue
            p, q, apq = p[keep], q[keep], apq[keep]
            theta = (A[q, q] - A[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t[theta == 0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            J = np.eye(n)
            J[p, p] = c
            J[q, q] = c
            J[p, q] = s
            J[q, p] = -s
            A = J.T @ A @ J
            A = 0.5 * (A + A.T)
            V = V @ J
    return np.diag(A).copy(), V


def sqrtm_psd(M):
    """Symmetric PSD square root; negative eigenvalues are clamped to 0."""
    w, V = jacobi_eigh(M)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(mu1, cov1, mu2, cov2, eps=1e-6):
    d = len(mu1)
    c1 = np.atleast_2d(cov1) + eps * np.eye(d)
    c2 = np.atleast_2d(cov2) + eps * np.eye(d)
    r1 = sqrtm_psd(c1)
    inner = sqrtm_psd(r1 @ c2 @ r1)
    diff = np.asarray(mu1) - np.asarray(mu2)
    val = float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * np.trace(inner))
    return max(val, 0.0)


@dataclass
class EmbeddingModel:
    """PCA basis fit on real-image features."""

    mean: np.ndarray
    components: np.ndarray   # (k, d), orthonormal rows

    @classmethod
    def fit(cls, X, k=64):
        X = np.asarray(X, dtype=np.float64)
        k = int(min(k, X.shape[1], len(X) - 1))
        mean = X.mean(axis=0)
        _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
        return cls(mean, vt[:k])

    @property
    def k(self):
        return len(self.components)

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T


def fid(real_feats, synth_feats, embedding=None):
    """Frechet distance between Gaussian fits of the embedded sets.

    Without an ``embedding`` the features are used as given.
    """
    a = np.asarray(real_feats, dtype=np.float64)
    b = np.asarray(synth_feats, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if embedding is not None:
        a = embedding.transform(a)
        b = embedding.transform(b)
    k = a.shape[1]
    if len(a) < k + 2 or len(b) < k + 2:
        raise ValueError(f"FID over {k} dims needs >= {k + 2} samples per set, got {len(a)} and {len(b)}")
    return frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


# -- Inception-Score proxy --------------------------------------------------

def inception_score(probs, splits=10):
    """exp(E_x KL(p(y|x) || p(y))) per split; returns ``(mean, std)``."""
    p = np.asarray(probs, dtype=np.float64)
    if len(p) < splits or splits < 1:
        raise ValueError(f"need at least {splits} samples for {splits} splits, got {len(p)}")
    scores = []
    for part in np.array_split(p, splits):
        if len(part) == 0:
            raise ValueError("degenerate split")
        marg = part.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(part > 0, part * (np.log(part) - np.log(marg)), 0.0).sum(axis=1)
        # KL is nonnegative; clamp rounding so the score never dips below 1
        scores.append(math.exp(max(float(kl.mean()), 0.0)))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score_proxy(synth_feats, prob_model, splits=10):
    return inception_score(prob_model.predict_proba(synth_feats), splits)


# -- full report ------------------------------------------------------------

@dataclass
class MetricConfig:
    embedding_k: int = 64
    is_splits: int = 10
    is_gbt_rounds: int = 100
    ssim: SsimConfig = None

    def __post_init__(self):
        if self.ssim is None:
            self.ssim = SsimConfig()
        elif isinstance(self.ssim, dict):
            self.ssim = SsimConfig(**self.ssim)
        if self.embedding_k < 1 or self.is_splits < 1:
            raise ValueError("metrics.embedding_k and is_splits must be >= 1")


@dataclass
class MetricReport:
    fid: float
    is_mean: float
    is_std: float
    ssim_mean: float
    psnr_db_mean: float
    n_real: int
    n_synth: int
    embedding_k: int
    pairing: str = "nearest real neighbour of the same class by SSIM"

    def to_dict(self):
        return asdict(self)

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def evaluate_report(real_images, real_labels, synth_images, synth_labels, config=None,
                    feature_config=None, real_feats=None, prob_model=None, out_path=None):
    """All four metrics for one synthetic set against the real set.

    Images are (n, H, W) in [0, 1]. The embedding and (unless given) the
    probability model are fit on the real features.
    """
    from .classify import gbt_train
    from .features import extract

    cfg = config or MetricConfig()
    real_images = np.asarray(real_images, dtype=np.float64)
    synth_images = np.asarray(synth_images, dtype=np.float64)
    real_labels = np.asarray(real_labels)
    synth_labels = np.asarray(synth_labels)
    if len(real_images) == 0 or len(synth_images) == 0:
        raise ValueError("both image sets must be non-empty")
    missing = set(np.unique(synth_labels)) - set(np.unique(real_labels))
    if missing:
        raise ValueError(f"classes {sorted(missing)} absent from the real set")
    missing = set(np.unique(real_labels)) - set(np.unique(synth_labels))
    if missing:
        raise ValueError(f"classes {sorted(missing)} absent from the synthetic set")
    if real_feats is None:
        real_feats, _ = extract(real_images, feature_config)
    synth_feats, _ = extract(synth_images, feature_config)
    emb = EmbeddingModel.fit(real_feats, cfg.embedding_k)
    fid_val = fid(real_feats, synth_feats, emb)
    if prob_model is None:
        prob_model = gbt_train(real_feats, real_labels, rounds=cfg.is_gbt_rounds)
    is_mean, is_std = inception_score_proxy(synth_feats, prob_model, cfg.is_splits)

    ssims, psnrs = [], []
    for c in np.unique(synth_labels):
        r = real_images[real_labels == c]
        s = synth_images[synth_labels == c]
        idx, best = best_ssim_matches(s, r, cfg.ssim)
        ssims.extend(best.tolist())
        psnrs.extend(psnr(si, r[j], cfg.ssim.data_range) for si, j in zip(s, idx))
    report = MetricReport(fid_val, is_mean, is_std, float(np.mean(ssims)), float(np.mean(psnrs)),
                          len(real_images), len(synth_images), emb.k)
    if out_path is not None:
        report.write(out_path)
    return report
