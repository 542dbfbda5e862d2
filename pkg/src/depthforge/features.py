"""Handcrafted depth-image descriptors fused into one feature vector.

All extractors take a 2-D array (or :class:`~depthforge.dataio.DepthImage`)
with values in [0, 1]. Each vectorised extractor has a ``*_reference``
double-loop twin that the tests hold it to.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

LBP_QUANT = 65535.0


@dataclass
class FeatureConfig:
    hog_cell: int = 8
    hog_bins: int = 9
    hog_block: int = 2
    hog_eps: float = 1e-6
    lbp_points: int = 8
    lbp_radius: float = 1.0
    sobel_bins: int = 64
    intensity_bins: int = 64

    def __post_init__(self):
        for name in ("hog_bins", "sobel_bins", "intensity_bins"):
            if getattr(self, name) < 2:
                raise ValueError(f"features.{name} must be >= 2")
        if self.hog_cell < 1 or self.hog_block < 1:
            raise ValueError("features.hog_cell and hog_block must be >= 1")
        if self.lbp_points != 8:
            raise ValueError("only the 8-neighbour uniform LBP is supported")

    @property
    def lbp_bins(self):
        return self.lbp_points * (self.lbp_points - 1) + 3


@dataclass
class FeatureVector:
    values: np.ndarray
    spans: dict = field(default_factory=dict)

    def segment(self, name):
        off, n = self.spans[name]
        return self.values[off:off + n]


def _pixels(image):
    px = getattr(image, "pixels", image)
    px = np.asarray(px, dtype=np.float64)
    if px.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {px.shape}")
    return px


# -- HOG --------------------------------------------------------------------

def _central_gradients(img):
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = img[:, 2:] - img[:, :-2]
    gy[1:-1, :] = img[2:, :] - img[:-2, :]
    return gx, gy


def _orientation_votes(gx, gy, nbins):
    """Unsigned orientation split linearly between the two nearest bin
    centres (centres at k * 180/nbins degrees)."""
    mag = np.hypot(gx, gy)
    ang = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    pos = ang / (180.0 / nbins)
    lo = np.floor(pos)
    frac = pos - lo
    b0 = lo.astype(np.int64) % nbins
    b1 = (b0 + 1) % nbins
    return mag, b0, b1, frac


def _check_hog_size(img, cfg):
    h, w = img.shape
    need = cfg.hog_cell * cfg.hog_block
    if h < need or w < need:
        raise ValueError(f"image {h}x{w} smaller than one HOG block ({need}x{need})")


def _normalize_blocks(cells, cfg):
    ncy, ncx, _ = cells.shape
    b = cfg.hog_block
    out = []
    for by in range(ncy - b + 1):
        for bx in range(ncx - b + 1):
            v = cells[by:by + b, bx:bx + b].ravel()
            out.append(v / math.sqrt(float(np.dot(v, v)) + cfg.hog_eps ** 2))
    return np.concatenate(out)


def hog_cells(image, cfg=None):
    cfg = cfg or FeatureConfig()
    img = _pixels(image)
    _check_hog_size(img, cfg)
    c = cfg.hog_cell
    ncy, ncx = img.shape[0] // c, img.shape[1] // c
    gx, gy = _central_gradients(img[:ncy * c, :ncx * c])
    mag, b0, b1, frac = _orientation_votes(gx, gy, cfg.hog_bins)
    cell_id = (np.arange(ncy * c) // c)[:, None] * ncx + (np.arange(ncx * c) // c)[None, :]
    n = ncy * ncx * cfg.hog_bins
    hist = np.bincount((cell_id * cfg.hog_bins + b0).ravel(), (mag * (1 - frac)).ravel(), n)
    hist += np.bincount((cell_id * cfg.hog_bins + b1).ravel(), (mag * frac).ravel(), n)
    return hist.reshape(ncy, ncx, cfg.hog_bins)


def hog(image, cfg=None):
    """Dalal-Triggs HOG: [-1, 0, 1] gradients, 2x2-cell blocks, stride one
    cell, L2-normalised."""
    cfg = cfg or FeatureConfig()
    return _normalize_blocks(hog_cells(image, cfg), cfg)


def hog_reference(image, cfg=None):
    cfg = cfg or FeatureConfig()
    img = _pixels(image)
    _check_hog_size(img, cfg)
    c, nb = cfg.hog_cell, cfg.hog_bins
    ncy, ncx = img.shape[0] // c, img.shape[1] // c
    cells = np.zeros((ncy, ncx, nb))
    h, w = ncy * c, ncx * c
    for y in range(h):
        for x in range(w):
            dx = img[y, x + 1] - img[y, x - 1] if 0 < x < w - 1 else 0.0
            dy = img[y + 1, x] - img[y - 1, x] if 0 < y < h - 1 else 0.0
            m = math.hypot(dx, dy)
            a = math.degrees(math.atan2(dy, dx)) % 180.0
            pos = a / (180.0 / nb)
            lo = math.floor(pos)
            f = pos - lo
            cells[y // c, x // c, lo % nb] += m * (1 - f)
            cells[y // c, x // c, (lo + 1) % nb] += m * f
    return _normalize_blocks(cells, cfg)


def hog_length(size, cfg=None):
    cfg = cfg or FeatureConfig()
    n = size // cfg.hog_cell - cfg.hog_block + 1
    return n * n * cfg.hog_block ** 2 * cfg.hog_bins


# -- LBP --------------------------------------------------------------------

def _transitions(code, p=8):
    bits = [(code >> i) & 1 for i in range(p)]
    return sum(bits[i] != bits[(i + 1) % p] for i in range(p))


def uniform_table(p=8):
    """Map each of the 2**p codes to its uniform bin; non-uniform -> last."""
    uniform = [c for c in range(2 ** p) if _transitions(c, p) <= 2]
    table = np.full(2 ** p, len(uniform), dtype=np.int64)
    table[uniform] = np.arange(len(uniform))
    return table


_UNIFORM8 = uniform_table(8)


def _lbp_offsets(p, r):
    """Sampling points (dy, dx) on the circle, snapped to exact integers
    where the trigonometry lands within 1e-9 of one."""
    out = []
    for k in range(p):
        dy = -r * math.sin(2 * math.pi * k / p)
        dx = r * math.cos(2 * math.pi * k / p)
        dy = round(dy) if abs(dy - round(dy)) < 1e-9 else dy
        dx = round(dx) if abs(dx - round(dx)) < 1e-9 else dx
        out.append((dy, dx))
    return out


def _quantize(img):
    return np.round(img * LBP_QUANT)


def lbp_codes(image, cfg=None):
    """8-bit LBP codes of interior pixels (bit k set when neighbour k >= centre).

    Neighbours are bilinear-interpolated and compared as a difference from
    the centre, on an integer-quantised copy, so the comparison is exactly
    invariant to additive shifts.
    """
    cfg = cfg or FeatureConfig()
    img = _quantize(_pixels(image))
    h, w = img.shape
    if h < 3 or w < 3:
        raise ValueError("LBP needs an image of at least 3x3")
    rad = int(math.ceil(cfg.lbp_radius))
    center = img[rad:h - rad, rad:w - rad]
    codes = np.zeros(center.shape, dtype=np.int64)
    for k, (dy, dx) in enumerate(_lbp_offsets(cfg.lbp_points, cfg.lbp_radius)):
        y0, x0 = math.floor(dy), math.floor(dx)
        fy, fx = dy - y0, dx - x0

        def at(oy, ox):
            return img[rad + oy:h - rad + oy, rad + ox:w - rad + ox]

        i00 = at(y0, x0)
        diff = i00 - center
        if fy:
            i10 = at(y0 + 1, x0)
            diff = diff + fy * (i10 - i00)
        if fx:
            i01 = at(y0, x0 + 1)
            diff = diff + fx * (i01 - i00)
        if fx and fy:
            i11 = at(y0 + 1, x0 + 1)
            diff = diff + fx * fy * (i00 - i01 - i10 + i11)
        codes |= (diff >= 0).astype(np.int64) << k
    return codes


def lbp_codes_reference(image, cfg=None):
    cfg = cfg or FeatureConfig()
    img = _quantize(_pixels(image))
    h, w = img.shape
    rad = int(math.ceil(cfg.lbp_radius))
    offs = _lbp_offsets(cfg.lbp_points, cfg.lbp_radius)
    codes = np.zeros((h - 2 * rad, w - 2 * rad), dtype=np.int64)
    for y in range(rad, h - rad):
        for x in range(rad, w - rad):
            c = img[y, x]
            code = 0
            for k, (dy, dx) in enumerate(offs):
                y0, x0 = math.floor(dy), math.floor(dx)
                fy, fx = dy - y0, dx - x0
                i00 = img[y + y0, x + x0]
                diff = i00 - c
                if fy:
                    i10 = img[y + y0 + 1, x + x0]
                    diff = diff + fy * (i10 - i00)
                if fx:
                    i01 = img[y + y0, x + x0 + 1]
                    diff = diff + fx * (i01 - i00)
                if fx and fy:
                    i11 = img[y + y0 + 1, x + x0 + 1]
                    diff = diff + fx * fy * (i00 - i01 - i10 + i11)
                if diff >= 0:
                    code |= 1 << k
            codes[y - rad, x - rad] = code
    return codes


def lbp_hist(image, cfg=None):
    """59-bin uniform LBP histogram, L1-normalised over interior pixels."""
    cfg = cfg or FeatureConfig()
    codes = lbp_codes(image, cfg)
    hist = np.bincount(_UNIFORM8[codes].ravel(), minlength=cfg.lbp_bins).astype(np.float64)
    return hist / hist.sum()


# -- Sobel ------------------------------------------------------------------

SOBEL_MAX = 4.0 * math.sqrt(2.0)


def sobel_magnitude(image):
    """Sobel gradient magnitude with replicated borders, scaled to [0, 1] by
    the largest magnitude reachable on a [0, 1] image."""
    img = np.pad(_pixels(image), 1, mode="edge")
    a = img[:-2, :-2]
    b = img[:-2, 1:-1]
    c = img[:-2, 2:]
    d = img[1:-1, :-2]
    f = img[1:-1, 2:]
    g = img[2:, :-2]
    hh = img[2:, 1:-1]
    i = img[2:, 2:]
    gx = (c + 2 * f + i) - (a + 2 * d + g)
    gy = (g + 2 * hh + i) - (a + 2 * b + c)
    return np.hypot(gx, gy) / SOBEL_MAX


def sobel_magnitude_reference(image):
    img = _pixels(image)
    h, w = img.shape
    kx = ((-1, 0, 1), (-2, 0, 2), (-1, 0, 1))
    ky = ((-1, -2, -1), (0, 0, 0), (1, 2, 1))
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            sx = sy = 0.0
            for j in range(3):
                for i in range(3):
                    v = img[min(max(y + j - 1, 0), h - 1), min(max(x + i - 1, 0), w - 1)]
                    sx += kx[j][i] * v
                    sy += ky[j][i] * v
            out[y, x] = math.hypot(sx, sy) / SOBEL_MAX
    return out


def _unit_hist(values, bins):
    idx = np.clip(np.floor(values * bins).astype(np.int64), 0, bins - 1)
    hist = np.bincount(idx.ravel(), minlength=bins).astype(np.float64)
    return hist / hist.sum()


def sobel_hist(image, cfg=None):
    cfg = cfg or FeatureConfig()
    img = _pixels(image)
    if min(img.shape) < 3:
        raise ValueError("Sobel histogram needs an image of at least 3x3")
    return _unit_hist(sobel_magnitude(img), cfg.sobel_bins)


def intensity_hist(image, cfg=None):
    """Equal-width histogram over [0, 1], L1-normalised."""
    cfg = cfg or FeatureConfig()
    return _unit_hist(np.clip(_pixels(image), 0.0, 1.0), cfg.intensity_bins)


# -- fusion -----------------------------------------------------------------

SEGMENTS = ("hog", "lbp", "sobel", "intensity")


def fuse(image, cfg=None):
    """hog || lbp || sobel || intensity, with the span of each segment."""
    cfg = cfg or FeatureConfig()
    parts = {
        "hog": hog(image, cfg),
        "lbp": lbp_hist(image, cfg),
        "sobel": sobel_hist(image, cfg),
        "intensity": intensity_hist(image, cfg),
    }
    spans, off = {}, 0
    for name in SEGMENTS:
        spans[name] = (off, len(parts[name]))
        off += len(parts[name])
    return FeatureVector(np.concatenate([parts[n] for n in SEGMENTS]), spans)


def extract(images, cfg=None):
    """Feature matrix (n, d) for a stack of [0, 1] images, plus spans."""
    cfg = cfg or FeatureConfig()
    rows = [fuse(im, cfg) for im in images]
    if not rows:
        raise ValueError("no images to extract features from")
    return np.stack([r.values for r in rows]), rows[0].spans


def feature_header(spans):
    cols = ["label"]
    for name in SEGMENTS:
        off, n = spans[name]
        cols += [f"{name}_{i}" for i in range(n)]
    return cols


def write_features_csv(path, matrix, labels, spans, classes):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(feature_header(spans))
        for row, y in zip(matrix, labels):
            w.writerow([classes[y]] + [repr(float(v)) for v in row])


def read_features_csv(path, classes):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        labels, rows = [], []
        for rec in reader:
            labels.append(classes.index(rec[0]))
            rows.append([float(v) for v in rec[1:]])
    spans, off = {}, 0
    for name in SEGMENTS:
        n = sum(1 for h in header[1:] if h.rsplit("_", 1)[0] == name)
        spans[name] = (off, n)
        off += n
    return np.array(rows), np.array(labels, dtype=np.int64), spans
