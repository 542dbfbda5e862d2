"""Decision tree, random forest and softmax gradient boosting over fused
features, plus evaluation, LDA projection and 1-D KDE.

Trees are stored as flat arrays (``feature``, ``threshold``, ``left``,
``right``, ``value``); ``x[feature] <= threshold`` goes left. Leaves have
``feature == -1``.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .nncore import thread_limit


def _as_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError(f"need an (n, d) matrix and n labels, got {X.shape} and {y.shape}")
    if len(X) == 0:
        raise ValueError("empty training data")
    if np.isnan(X).any():
        raise ValueError("feature matrix contains NaN")
    return X, y


def gini(counts):
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.dot(p, p))


@dataclass
class Tree:
    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)
    n_samples: list = field(default_factory=list)
    impurity: list = field(default_factory=list)

    def _add(self, value, n, imp):
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        self.n_samples.append(int(n))
        self.impurity.append(float(imp))
        return len(self.feature) - 1

    @property
    def n_nodes(self):
        return len(self.feature)

    def depth(self, node=0):
        if self.feature[node] < 0:
            return 0
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def apply(self, X):
        """Leaf index reached by every row of ``X``."""
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold, dtype=np.float64)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(len(X), dtype=np.int64)
        active = feat[node] >= 0
        rows = np.arange(len(X))
        while active.any():
            r = rows[active]
            nd = node[r]
            go_left = X[r, feat[nd]] <= thr[nd]
            node[r] = np.where(go_left, left[nd], right[nd])
            active = feat[node] >= 0
        return node

    def predict_value(self, X):
        vals = np.asarray(self.value, dtype=np.float64)
        return vals[self.apply(np.asarray(X, dtype=np.float64))]

    def to_dict(self):
        return {
            "feature": list(map(int, self.feature)),
            "threshold": list(map(float, self.threshold)),
            "left": list(map(int, self.left)),
            "right": list(map(int, self.right)),
            "value": [np.asarray(v, dtype=np.float64).tolist() for v in self.value],
            "n_samples": self.n_samples,
            "impurity": self.impurity,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- CART classification ----------------------------------------------------

def best_gini_split(X, y, n_classes, min_leaf, features):
    """Exhaustive midpoint search. Returns ``(score, feature, threshold)`` for
    the lowest weighted child impurity (ties: lowest feature index, then
    lowest threshold), or ``None``.

    ``score`` is ``n_l * gini_l + n_r * gini_r``.
    """
    n = len(y)
    if n < 2 * min_leaf:
        return None
    features = np.sort(np.asarray(features))
    Xf = X[:, features]
    order = np.argsort(Xf, axis=0, kind="stable")
    xs = np.take_along_axis(Xf, order, axis=0)
    onehot = np.eye(n_classes)[y]
    left = np.cumsum(onehot[order], axis=0)[:-1]          # (n-1, f, C)
    total = onehot.sum(axis=0)
    right = total - left
    n_l = np.arange(1, n, dtype=np.float64)[:, None]
    n_r = n - n_l
    score = (n_l - (left ** 2).sum(-1) / n_l) + (n_r - (right ** 2).sum(-1) / n_r)
    valid = xs[1:] > xs[:-1]
    valid[: min_leaf - 1] = False
    if min_leaf > 1:
        valid[n - min_leaf:] = False
    if not valid.any():
        return None
    score = np.where(valid, score, np.inf).T               # (f, n-1)
    flat = int(np.argmin(score))
    fi, pos = divmod(flat, n - 1)
    thr = 0.5 * (xs[pos, fi] + xs[pos + 1, fi])
    return float(score[fi, pos]), int(features[fi]), float(thr)


def _grow_classifier(X, y, n_classes, max_depth, min_leaf, mtry, rng):
    tree = Tree()
    d = X.shape[1]

    def node_value(idx):
        counts = np.bincount(y[idx], minlength=n_classes).astype(np.float64)
        return counts / counts.sum(), counts

    def grow(idx, depth):
        dist, counts = node_value(idx)
        imp = gini(counts)
        nid = tree._add(dist.tolist(), len(idx), imp)
        if depth >= max_depth or imp == 0.0 or len(idx) < 2 * min_leaf:
            return nid
        feats = np.arange(d) if mtry >= d else rng.choice(d, size=mtry, replace=False)
        found = best_gini_split(X[idx], y[idx], n_classes, min_leaf, feats)
        if found is None:
            return nid
        score, f, thr = found
        if score / len(idx) >= imp:
            return nid
        mask = X[idx, f] <= thr
        tree.feature[nid] = f
        tree.threshold[nid] = thr
        tree.left[nid] = grow(idx[mask], depth + 1)
        tree.right[nid] = grow(idx[~mask], depth + 1)
        return nid

    grow(np.arange(len(y)), 0)
    return tree


@dataclass
class TreeModel:
    tree: Tree
    n_classes: int

    def predict_proba(self, X):
        return self.tree.predict_value(X)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def to_dict(self):
        return {"kind": "tree", "n_classes": self.n_classes, "tree": self.tree.to_dict()}


def dt_train(X, y, max_depth=12, min_leaf=2, n_classes=None, mtry=None, seed=0):
    """CART with Gini impurity."""
    X, y = _as_xy(X, y)
    if len(y) < min_leaf:
        raise ValueError(f"need at least min_leaf={min_leaf} samples")
    n_classes = n_classes or int(y.max()) + 1
    mtry = X.shape[1] if mtry is None else mtry
    rng = np.random.default_rng(seed)
    return TreeModel(_grow_classifier(X, y, n_classes, max_depth, min_leaf, mtry, rng), n_classes)


@dataclass
class ForestModel:
    trees: list
    seeds: list
    n_classes: int

    def votes(self, X):
        X = np.asarray(X, dtype=np.float64)
        v = np.zeros((len(X), self.n_classes))
        rows = np.arange(len(X))
        for t in self.trees:
            v[rows, np.argmax(t.predict_value(X), axis=1)] += 1
        return v

    def predict_proba(self, X):
        return self.votes(X) / len(self.trees)

    def predict(self, X):
        return np.argmax(self.votes(X), axis=1)

    def to_dict(self):
        return {"kind": "forest", "n_classes": self.n_classes, "seeds": self.seeds,
                "trees": [t.to_dict() for t in self.trees]}


def rf_train(X, y, n_trees=100, mtry=None, seed=0, max_depth=12, min_leaf=2, bootstrap=True,
             n_classes=None, n_jobs=None):
    """Bagged CART trees with per-split feature subsampling.

    Each tree draws its bootstrap and feature subsets from its own seed
    stream, so results do not depend on ``n_jobs``.
    """
    X, y = _as_xy(X, y)
    if len(y) < 2:
        raise ValueError("random forest needs at least 2 samples")
    n_classes = n_classes or int(y.max()) + 1
    d = X.shape[1]
    mtry = int(np.floor(np.sqrt(d))) if mtry is None else int(mtry)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_trees)]

    def one(s):
        rng = np.random.default_rng(s)
        idx = rng.integers(0, len(y), len(y)) if bootstrap else np.arange(len(y))
        return _grow_classifier(X[idx], y[idx], n_classes, max_depth, min_leaf, mtry, rng)

    jobs = n_jobs or thread_limit()
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            trees = list(ex.map(one, seeds))
    else:
        trees = [one(s) for s in seeds]
    return ForestModel(trees, seeds, n_classes)


# -- gradient boosting ------------------------------------------------------

def quantile_cuts(X, max_bins=32):
    """Per-feature cut points: midpoints between consecutive distinct values
    at evenly spaced quantile positions."""
    cuts = []
    for col in X.T:
        u = np.unique(col)
        if len(u) <= 1:
            cuts.append(np.empty(0))
            continue
        mids = 0.5 * (u[1:] + u[:-1])
        if len(mids) > max_bins - 1:
            pos = np.linspace(0, len(mids) - 1, max_bins - 1).round().astype(int)
            mids = mids[np.unique(pos)]
        cuts.append(mids)
    return cuts


def bin_matrix(X, cuts):
    return np.stack([np.searchsorted(c, X[:, j], side="left") for j, c in enumerate(cuts)], axis=1)


def _grow_regressor(B, cuts, g, max_depth, min_leaf, nb, flat_all=None, root_counts=None):
    """Least-squares tree on residuals ``g`` using binned features ``B``.

    A row goes left when ``bin <= b``, i.e. ``x <= cuts[j][b]``. Histograms
    are built for the smaller child only; the sibling is parent minus child.
    """
    tree = Tree()
    n, d = B.shape
    if flat_all is None:
        flat_all = B + (np.arange(d) * nb)[None, :]
    n_cuts = np.array([len(c) for c in cuts])
    usable = np.arange(nb)[None, :] < n_cuts[:, None]       # (d, nb)

    def hists(idx):
        flat = flat_all[idx].ravel()
        hs = np.bincount(flat, np.repeat(g[idx], d), d * nb).reshape(d, nb)
        hc = np.bincount(flat, minlength=d * nb).reshape(d, nb)
        return hs, hc

    def grow(idx, depth, hs, hc):
        gi = g[idx]
        total, cnt = gi.sum(), len(idx)
        nid = tree._add(float(total / cnt), cnt, float(((gi - total / cnt) ** 2).sum()))
        if depth >= max_depth or cnt < 2 * min_leaf:
            return nid
        if hs is None:
            hs, hc = hists(idx)
        sl = np.cumsum(hs, axis=1)
        cl = np.cumsum(hc, axis=1)
        cr = cnt - cl
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = sl ** 2 / cl + (total - sl) ** 2 / cr - total ** 2 / cnt
        ok = usable & (cl >= min_leaf) & (cr >= min_leaf)
        gain = np.where(ok, gain, -np.inf)
        best = int(np.argmax(gain))
        if not np.isfinite(gain.flat[best]) or gain.flat[best] <= 1e-12:
            return nid
        f, b = divmod(best, nb)
        mask = B[idx, f] <= b
        li, ri = idx[mask], idx[~mask]
        tree.feature[nid] = f
        tree.threshold[nid] = float(cuts[f][b])
        hl = hr = (None, None)
        if depth + 1 < max_depth:
            small_left = len(li) <= len(ri)
            hs_s, hc_s = hists(li if small_left else ri)
            other = (hs - hs_s, hc - hc_s)
            hl, hr = ((hs_s, hc_s), other) if small_left else (other, (hs_s, hc_s))
        tree.left[nid] = grow(li, depth + 1, *hl)
        tree.right[nid] = grow(ri, depth + 1, *hr)
        return nid

    root = np.arange(n)
    if root_counts is None:
        grow(root, 0, None, None)
    else:
        hs = np.bincount(flat_all.ravel(), np.repeat(g, d), d * nb).reshape(d, nb)
        grow(root, 0, hs, root_counts)
    return tree


def softmax(F):
    F = F - F.max(axis=1, keepdims=True)
    e = np.exp(F)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class GbtModel:
    prior: np.ndarray
    trees: list
    lr: float
    n_classes: int
    loss_history: list = field(default_factory=list)

    def raw(self, X, rounds=None):
        X = np.asarray(X, dtype=np.float64)
        F = np.tile(self.prior, (len(X), 1))
        for per_class in self.trees[:rounds]:
            for k, t in enumerate(per_class):
                F[:, k] += self.lr * t.predict_value(X)
        return F

    def predict_proba(self, X):
        return softmax(self.raw(X))

    def predict(self, X):
        return np.argmax(self.raw(X), axis=1)

    def to_dict(self):
        return {"kind": "gbt", "n_classes": self.n_classes, "lr": self.lr,
                "prior": self.prior.tolist(), "loss_history": self.loss_history,
                "trees": [[t.to_dict() for t in r] for r in self.trees]}


def cross_entropy(P, y):
    return float(-np.mean(np.log(np.clip(P[np.arange(len(y)), y], 1e-300, None))))


def gbt_train(X, y, rounds=200, lr=0.1, max_depth=4, min_leaf=2, n_classes=None, max_bins=32):
    """Softmax gradient boosting: each round fits one least-squares
    regression tree per class to ``onehot - p`` and adds ``lr`` times its
    leaf means. Split search uses quantile-binned features."""
    X, y = _as_xy(X, y)
    if len(y) < 2:
        raise ValueError("gradient boosting needs at least 2 samples")
    n_classes = n_classes or int(y.max()) + 1
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    prior = np.log(np.clip(counts / counts.sum(), 1e-12, None))
    cuts = quantile_cuts(X, max_bins)
    B = bin_matrix(X, cuts)
    nb = max((len(c) for c in cuts), default=0) + 1
    flat_all = B + (np.arange(B.shape[1]) * nb)[None, :]
    root_counts = np.bincount(flat_all.ravel(), minlength=B.shape[1] * nb)
    root_counts = root_counts.reshape(B.shape[1], nb)
    Y = np.eye(n_classes)[y]
    F = np.tile(prior, (len(y), 1))
    model = GbtModel(prior, [], lr, n_classes, [cross_entropy(softmax(F), y)])
    for _ in range(rounds):
        resid = Y - softmax(F)
        per_class = []
        for k in range(n_classes):
            t = _grow_regressor(B, cuts, resid[:, k], max_depth, min_leaf, nb, flat_all, root_counts)
            F[:, k] += lr * np.asarray(t.value)[t.apply(X)]
            per_class.append(t)
        model.trees.append(per_class)
        model.loss_history.append(cross_entropy(softmax(F), y))
    return model


# -- evaluation -------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray

    def to_dict(self):
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "confusion": self.confusion.tolist()}


def confusion_matrix(pred, truth, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def evaluate(pred, truth, n_classes=None):
    """Accuracy and macro precision/recall/F1 (0/0 counts as 0).

    Confusion rows are true classes, columns predictions.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction/truth length mismatch: {pred.shape} vs {truth.shape}")
    n_classes = n_classes or int(max(pred.max(initial=0), truth.max(initial=0))) + 1
    cm = confusion_matrix(pred, truth, n_classes)
    return report_from_confusion(cm)


def report_from_confusion(cm):
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    col = cm.sum(axis=0).astype(np.float64)
    row = cm.sum(axis=1).astype(np.float64)
    prec = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
    rec = np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)
    den = prec + rec
    f1 = np.divide(2 * prec * rec, den, out=np.zeros_like(tp), where=den > 0)
    acc = float(tp.sum() / cm.sum()) if cm.sum() else 0.0
    return EvalReport(acc, float(prec.mean()), float(rec.mean()), float(f1.mean()), cm)


# -- class-separability analysis -------------------------------------------

def lda_project(X, y, out_dims=1):
    """Fisher LDA: top generalized eigenvectors of (S_b, S_w + r I) with
    r = 1e-6 * tr(S_w) / d. Returns ``(projected, basis, eigenvalues)``."""
    X, y = _as_xy(X, y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("LDA needs at least two classes")
    d = X.shape[1]
    mu = X.mean(axis=0)
    Sw = np.zeros((d, d))
    Sb = np.zeros((d, d))
    for c in classes:
        Xc = X[y == c]
        mc = Xc.mean(axis=0)
        D = Xc - mc
        Sw += D.T @ D
        diff = (mc - mu)[:, None]
        Sb += len(Xc) * (diff @ diff.T)
    tr = np.trace(Sw)
    if tr <= 0:
        raise ValueError("degenerate within-class scatter")
    Sw += (1e-6 * tr / d) * np.eye(d)
    vals, vecs = scipy.linalg.eigh(Sb, Sw)
    order = np.argsort(vals)[::-1][:out_dims]
    basis = vecs[:, order]
    basis /= np.linalg.norm(basis, axis=0, keepdims=True)
    return (X - mu) @ basis, basis, vals[order]


def silverman_bandwidth(samples):
    x = np.asarray(samples, dtype=np.float64)
    sd = x.std(ddof=1) if len(x) > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * len(x) ** (-0.2)


def kde1d(samples, bandwidth=None, grid_points=256, min_bandwidth=1e-3):
    """Gaussian KDE on a grid spanning the data +/- 3 bandwidths."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if len(x) < 2:
        raise ValueError("KDE needs at least two samples")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        h = min_bandwidth
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, grid_points)
    z = (grid[:, None] - x[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (len(x) * h * np.sqrt(2 * np.pi))
    return grid, dens


# -- model dispatch ---------------------------------------------------------

def train_model(kind, X, y, cfg, seed=0, n_classes=None):
    if kind == "dt":
        return dt_train(X, y, cfg.dt_max_depth, cfg.min_leaf, n_classes=n_classes)
    if kind == "rf":
        return rf_train(X, y, cfg.rf_trees, cfg.rf_mtry, seed, cfg.dt_max_depth, cfg.min_leaf,
                        n_classes=n_classes)
    if kind == "gbt":
        return gbt_train(X, y, cfg.gbt_rounds, cfg.gbt_lr, cfg.gbt_max_depth, cfg.min_leaf,
                         n_classes=n_classes)
    raise ValueError(f"unknown classifier {kind!r}")


@dataclass
class ClassifyConfig:
    dt_max_depth: int = 12
    min_leaf: int = 2
    rf_trees: int = 100
    rf_mtry: int | None = None
    gbt_rounds: int = 200
    gbt_lr: float = 0.1
    gbt_max_depth: int = 4
    split_ratio: float = 0.8
    models: tuple = ("rf", "dt", "gbt")

    def __post_init__(self):
        if not 0 < self.split_ratio < 1:
            raise ValueError("classify.split_ratio must lie in (0, 1)")
        if self.rf_trees < 1 or self.gbt_rounds < 0 or self.dt_max_depth < 1:
            raise ValueError("classify.rf_trees and dt_max_depth must be >= 1, gbt_rounds >= 0")
        if self.gbt_lr <= 0:
            raise ValueError("classify.gbt_lr must be > 0")
        self.models = tuple(self.models)
        for m in self.models:
            if m not in ("rf", "dt", "gbt"):
                raise ValueError(f"classify.models: unknown model {m!r}")


def save_model(path, model):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh)


def load_model(path):
    with open(path) as fh:
        d = json.load(fh)
    kind = d["kind"]
    if kind == "tree":
        return TreeModel(Tree.from_dict(d["tree"]), d["n_classes"])
    if kind == "forest":
        return ForestModel([Tree.from_dict(t) for t in d["trees"]], d["seeds"], d["n_classes"])
    if kind == "gbt":
        trees = [[Tree.from_dict(t) for t in r] for r in d["trees"]]
        return GbtModel(np.array(d["prior"]), trees, d["lr"], d["n_classes"], d["loss_history"])
    raise ValueError(f"unknown model kind {kind!r}")
