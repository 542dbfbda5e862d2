"""Depth-image I/O, manifests, splitting and the procedural face fixture."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import CLASSES


class ImageFormatError(ValueError):
    pass


@dataclass
class DepthImage:
    """Single-channel image with pixels in [0, 1]."""

    pixels: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"depth image must be 2-D, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("depth image pixels must lie in [0, 1]")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


# -- image files ------------------------------------------------------------

def load_image(path):
    """Read an 8- or 16-bit grayscale PNG/PGM, scaled to [0, 1] by the
    format's maximum value."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"{path}: cannot read image ({exc})") from exc
    mode = img.mode
    if mode == "L":
        arr = np.asarray(img, dtype=np.float64) / 255.0
        return DepthImage(arr, 8)
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        raw = np.asarray(img)
        if mode == "I" and raw.max(initial=0) > 65535:
            raise ImageFormatError(f"{path}: 32-bit integer images are not supported")
        return DepthImage(raw.astype(np.float64) / 65535.0, 16)
    raise ImageFormatError(f"{path}: unsupported image mode {mode!r}; need single-channel 8/16-bit")


def save_image(path, image, bit_depth=None):
    """Write a :class:`DepthImage` (or [0,1] array) as grayscale PNG/PGM."""
    if not isinstance(image, DepthImage):
        image = DepthImage(image, bit_depth or 8)
    depth = bit_depth or image.bit_depth
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if depth == 8:
        q = np.round(image.pixels * 255.0).astype(np.uint8)
        Image.fromarray(q, mode="L").save(path)
    elif depth == 16:
        q = np.round(image.pixels * 65535.0).astype(np.uint16)
        Image.fromarray(q).save(path)
    else:
        raise ValueError(f"bit depth must be 8 or 16, got {depth}")


def resize(image, w, h):
    """Bilinear resize with corner-aligned sampling."""
    if w < 8 or h < 8:
        raise ValueError(f"target size {w}x{h} below 8x8")
    src = image.pixels if isinstance(image, DepthImage) else np.asarray(image, np.float64)
    sh, sw = src.shape
    if (sh, sw) == (h, w):
        out = src.copy()
    else:
        ys = np.linspace(0.0, sh - 1, h) if h > 1 else np.zeros(1)
        xs = np.linspace(0.0, sw - 1, w) if w > 1 else np.zeros(1)
        y0 = np.clip(np.floor(ys).astype(int), 0, max(sh - 2, 0))
        x0 = np.clip(np.floor(xs).astype(int), 0, max(sw - 2, 0))
        y1 = np.minimum(y0 + 1, sh - 1)
        x1 = np.minimum(x0 + 1, sw - 1)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
        bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
        out = np.clip(top * (1 - fy) + bot * fy, 0.0, 1.0)
    depth = image.bit_depth if isinstance(image, DepthImage) else 8
    return DepthImage(out, depth)


def normalize(pixels):
    """[0, 1] -> [-1, 1]."""
    return 2.0 * np.asarray(pixels) - 1.0


def denormalize(values):
    """[-1, 1] -> [0, 1], clipped."""
    return np.clip((np.asarray(values, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def to_uint8(values):
    """Generator output in [-1, 1] -> 8-bit pixels."""
    return np.round(denormalize(values) * 255.0).astype(np.uint8)


# -- manifests --------------------------------------------------------------

@dataclass
class Manifest:
    paths: list
    labels: np.ndarray
    root: Path
    classes: tuple = CLASSES

    def __len__(self):
        return len(self.paths)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Manifest([self.paths[i] for i in idx], self.labels[idx], self.root, self.classes)

    def resolve(self, i):
        p = Path(self.paths[i])
        return p if p.is_absolute() else self.root / p


def read_manifest(path, classes=CLASSES):
    path = Path(path)
    paths, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: manifest needs a 'path,label' header")
        for row in reader:
            if row["label"] not in classes:
                raise ValueError(f"{path}: unknown label {row['label']!r}; expected one of {classes}")
            paths.append(row["path"])
            labels.append(classes.index(row["label"]))
    return Manifest(paths, np.array(labels, dtype=np.int64), path.parent, tuple(classes))


def write_manifest(path, manifest):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label"])
        for p, y in zip(manifest.paths, manifest.labels):
            w.writerow([str(p), manifest.classes[y]])


def load_dataset(manifest, size=None):
    """Stack every manifest image into (N, H, W) float64 in [0, 1]."""
    imgs = []
    for i in range(len(manifest)):
        p = manifest.resolve(i)
        if not p.exists():
            raise FileNotFoundError(f"manifest entry {p} does not exist")
        im = load_image(p)
        if size is not None and im.pixels.shape != (size, size):
            im = resize(im, size, size)
        imgs.append(im.pixels)
    return np.stack(imgs), manifest.labels.copy()


def split(manifest_or_labels, ratio=0.8, seed=0):
    """Stratified train/test index split with an exact per-class floor."""
    labels = getattr(manifest_or_labels, "labels", manifest_or_labels)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise ValueError(f"class {c} has {len(idx)} sample(s); need at least 2 to split")
        idx = idx[rng.permutation(len(idx))]
        n_train = min(max(int(np.floor(ratio * len(idx))), 1), len(idx) - 1)
        train.append(idx[:n_train])
        test.append(idx[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


# -- procedural fixture -----------------------------------------------------

@dataclass
class FixtureConfig:
    n_per_class: int = 400
    image_size: int = 64
    seed: int = 0
    noise: float = 0.01

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValueError("dataio.n_per_class must be >= 1")
        if self.image_size < 8:
            raise ValueError("dataio.image_size must be >= 8")


def _gauss(xx, yy, cx, cy, sx, sy):
    return np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))


def render_face(label, rng, size=64, noise=0.01):
    """One procedural depth face in [0, 1] (near = bright).

    Head: elliptical dome. Features: nose bump, two eye sockets and a
    class-dependent mouth (neutral bar, happy upward arc, fear open ellipse).
    Positions, scales and depth gain are jittered per sample.
    """
    u = np.linspace(-1.0, 1.0, size)
    xx, yy = np.meshgrid(u, u)
    cx, cy = rng.normal(0, 0.03, 2)
    ax = 0.62 * (1 + rng.normal(0, 0.04))
    ay = 0.80 * (1 + rng.normal(0, 0.04))
    r2 = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
    inside = r2 < 1.0
    dome = np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
    depth = np.where(inside, 0.35 + 0.35 * dome, 0.0)

    gain = 1 + rng.normal(0, 0.05)
    nose_y = cy + 0.05 * ay + rng.normal(0, 0.015)
    depth += 0.18 * gain * _gauss(xx, yy, cx, nose_y, 0.07 * ax, 0.14 * ay)
    eye_y = cy - 0.25 * ay + rng.normal(0, 0.015)
    eye_dx = 0.38 * ax * (1 + rng.normal(0, 0.04))
    for side in (-1, 1):
        depth -= 0.13 * gain * _gauss(xx, yy, cx + side * eye_dx, eye_y, 0.11 * ax, 0.07 * ay)

    mouth_y = cy + 0.45 * ay + rng.normal(0, 0.015)
    mouth_w = 0.30 * ax * (1 + rng.normal(0, 0.05))
    dx = (xx - cx) / mouth_w
    if label == 0:
        m = np.exp(-0.5 * ((yy - mouth_y) / 0.025) ** 2) * np.exp(-0.5 * dx ** 8)
        depth -= 0.10 * gain * m
    elif label == 1:
        curve = mouth_y - 0.05 + 0.10 * (1.0 - dx ** 2)
        m = np.exp(-0.5 * ((yy - curve) / 0.025) ** 2) * np.exp(-0.5 * dx ** 8)
        depth -= 0.12 * gain * m
    else:
        open_h = 0.09 * (1 + rng.normal(0, 0.08))
        r = dx ** 2 + ((yy - mouth_y) / open_h) ** 2
        depth -= 0.18 * gain * np.exp(-0.5 * r ** 2)
    depth = np.where(inside, depth, 0.0)
    depth += noise * rng.standard_normal(depth.shape)
    return np.clip(depth, 0.0, 1.0)


def fixture_generate(config, out_dir, classes=CLASSES):
    """Render ``n_per_class`` faces per class to ``<out_dir>/<label>/<i>.png``
    and write ``<out_dir>/manifest.csv``."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(config.seed)
    paths, labels = [], []
    for c, name in enumerate(classes):
        for i in range(config.n_per_class):
            img = render_face(c % 3, rng, config.image_size, config.noise)
            rel = Path(name) / f"{i:04d}.png"
            save_image(out_dir / rel, img, 8)
            paths.append(str(rel))
            labels.append(c)
    manifest = Manifest(paths, np.array(labels, np.int64), out_dir, tuple(classes))
    write_manifest(out_dir / "manifest.csv", manifest)
    return manifest


def fixture_arrays(config, classes=CLASSES):
    """In-memory fixture quantised exactly like the on-disk PNGs."""
    rng = np.random.default_rng(config.seed)
    imgs, labels = [], []
    for c in range(len(classes)):
        for _ in range(config.n_per_class):
            img = render_face(c % 3, rng, config.image_size, config.noise)
            imgs.append(np.round(img * 255.0) / 255.0)
            labels.append(c)
    return np.stack(imgs), np.array(labels, np.int64)
