"""Face-crop ingestion, bicubic degradation, augmentation and manifest iteration."""

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class DataError(Exception):
    pass


# ----------------------------------------------------------------------------
# bicubic resampling
# ----------------------------------------------------------------------------

def cubic(x, a=-0.5):
    """Keys cubic convolution kernel; a = -0.5 is the Catmull-Rom choice."""
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
        np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0),
    )


def _resize_weights(n_in, n_out, antialias=True):
    """Dense (n_out, n_in) interpolation matrix with symmetric edge handling."""
    scale = n_out / n_in
    support = 2.0
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    half = support * stretch
    first = np.floor(centers - half).astype(int)
    taps = int(math.ceil(2 * half)) + 2
    idx = first[:, None] + np.arange(taps)[None, :]
    w = cubic((centers[:, None] - idx) / stretch) / stretch
    w /= w.sum(1, keepdims=True)
    # mirror out-of-range taps (half-sample symmetric, as imresize does)
    period = 2 * n_in
    idx = np.mod(idx, period)
    idx = np.where(idx >= n_in, period - 1 - idx, idx)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), idx.ravel()), w.ravel())
    return mat


def imresize(img, size, antialias=True):
    """Bicubic resize of an (H, W) or (H, W, C) float image to ``size = (h, w)``."""
    img = np.asarray(img, dtype=np.float64)
    h, w = size
    if img.shape[:2] == (h, w):
        return img.copy()
    wy = _resize_weights(img.shape[0], h, antialias)
    wx = _resize_weights(img.shape[1], w, antialias)
    out = np.tensordot(wy, img, axes=(1, 0))
    out = np.tensordot(wx, out, axes=(1, 1)).swapaxes(0, 1)
    return out


# ----------------------------------------------------------------------------
# samples
# ----------------------------------------------------------------------------

@dataclass
class SRSample:
    hr: np.ndarray        # (H, W, 3) in [0, 1]
    lr_up: np.ndarray     # (H, W, 3) in [0, 1]
    source_id: str = ""
    split: str = "train"

    def __post_init__(self):
        if self.hr.shape != self.lr_up.shape:
            raise DataError(f"hr {self.hr.shape} and lr_up {self.lr_up.shape} differ in shape")


def center_crop_square(img):
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top:top + s, left:left + s]


def degrade(hr, scale=8):
    """Bicubic down by ``scale`` then bicubic back up to the HR size, clamped."""
    h, w = hr.shape[:2]
    if h % scale or w % scale:
        raise DataError(f"HR size {h}x{w} is not divisible by scale {scale}")
    lr = imresize(hr, (h // scale, w // scale))
    return np.clip(imresize(lr, (h, w)), 0.0, 1.0)


def prepare_pair(image, scale=8, size=128, source_id="", split="train"):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if min(img.shape[:2]) < size:
        raise DataError(f"image {source_id or ''} is smaller than {size}px")
    hr = np.clip(imresize(center_crop_square(img[..., :3]), (size, size)), 0.0, 1.0)
    return SRSample(hr, degrade(hr, scale), source_id, split)


def augment(sample: SRSample, rng, flip=None, factor=None, max_scale=1.3):
    """Random horizontal flip and zoom-then-recrop, applied identically to both images."""
    if flip is None:
        flip = rng.random() < 0.5
    if factor is None:
        factor = rng.uniform(1.0, max_scale)
    hr, lr = sample.hr, sample.lr_up
    if flip:
        hr, lr = hr[:, ::-1], lr[:, ::-1]
    h, w = hr.shape[:2]
    nh, nw = int(round(h * factor)), int(round(w * factor))
    if (nh, nw) != (h, w):
        top, left = (nh - h) // 2, (nw - w) // 2
        hr = np.clip(imresize(hr, (nh, nw)), 0, 1)[top:top + h, left:left + w]
        lr = np.clip(imresize(lr, (nh, nw)), 0, 1)[top:top + h, left:left + w]
    return replace(sample, hr=np.ascontiguousarray(hr), lr_up=np.ascontiguousarray(lr))


# ----------------------------------------------------------------------------
# image io
# ----------------------------------------------------------------------------

def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, img):
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


# ----------------------------------------------------------------------------
# manifest
# ----------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    records: List[Tuple[str, str]]
    root: str = "."
    seed: int = 0
    counts: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.counts = {s: sum(1 for _, sp in self.records if sp == s) for s in SPLITS}

    def paths(self, split):
        return [os.path.join(self.root, p) for p, s in self.records if s == split]


def load_manifest(path, root=None, seed=0, check_files=True):
    """Read a ``path,split`` CSV. Relative paths resolve against ``root``
    (default: the manifest's directory)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest {path} does not exist")
    root = str(root) if root is not None else str(path.parent)
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "split"} <= set(reader.fieldnames):
            raise DataError(f"manifest {path} must have a 'path,split' header")
        for row in reader:
            if row["split"] not in SPLITS:
                raise DataError(f"unknown split {row['split']!r} for {row['path']}")
            records.append((row["path"], row["split"]))
    seen = {}
    for p, s in records:
        if seen.setdefault(p, s) != s:
            raise DataError(f"{p} appears in both {seen[p]} and {s} splits")
    manifest = DatasetManifest(records, root, seed)
    if check_files:
        missing = [os.path.join(root, p) for p, _ in records if not os.path.isfile(os.path.join(root, p))]
        if missing:
            raise DataError("missing image files:\n  " + "\n  ".join(missing))
    return manifest


def write_manifest(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "split"])
        w.writerows(records)


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


class PairDataset:
    """Loads and degrades every image of one split once, then serves samples."""

    def __init__(self, manifest: DatasetManifest, split, scale=8, size=128):
        self.split = split
        self.samples: List[SRSample] = []
        self.skipped: List[Tuple[str, str]] = []
        for p in manifest.paths(split):
            try:
                self.samples.append(prepare_pair(read_image(p), scale, size, os.path.basename(p), split))
            except (OSError, DataError) as e:
                log.warning("skipping %s: %s", p, e)
                self.skipped.append((p, str(e)))

    def __len__(self):
        return len(self.samples)


def num_batches(n, batch):
    return math.ceil(n / batch)


def iterate(dataset: PairDataset, batch, seed, epoch=0, shuffle=True, augment_train=True):
    """Yield ``(hr, lr_up, ids)`` batches as (B, 3, H, W) float32 arrays.

    Order and augmentation draws depend only on (seed, epoch, batch index).
    """
    n = len(dataset)
    order = epoch_order(n, seed, epoch) if shuffle else np.arange(n)
    for bi in range(num_batches(n, batch)):
        idx = order[bi * batch:(bi + 1) * batch]
        rng = np.random.default_rng([seed, epoch, bi, 1])
        items = [dataset.samples[i] for i in idx]
        if augment_train and dataset.split == "train":
            items = [augment(s, rng) for s in items]
        hr = np.stack([s.hr.transpose(2, 0, 1) for s in items]).astype(np.float32)
        lr = np.stack([s.lr_up.transpose(2, 0, 1) for s in items]).astype(np.float32)
        yield hr, lr, [s.source_id for s in items]


# ----------------------------------------------------------------------------
# synthetic aligned faces for desk-scale runs
# ----------------------------------------------------------------------------

def _sigmoid(z):
    return 1 / (1 + np.exp(-np.clip(z, -60, 60)))


def synthetic_face(size, rng):
    """A smooth cartoon face: shaded head ellipse, eyes, brows, nose and mouth."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2 - 1
    bg = rng.uniform(0.1, 0.9, 3)
    img = bg + 0.15 * (yy[..., None] * rng.uniform(-1, 1, 3))
    skin = rng.uniform(0.45, 0.95) * np.array([1.0, rng.uniform(0.7, 0.85), rng.uniform(0.55, 0.75)])
    cx, cy = rng.uniform(-0.06, 0.06, 2)
    ax, ay = rng.uniform(0.55, 0.7), rng.uniform(0.7, 0.85)
    head = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
    mask = _sigmoid((1 - head) * 25)
    shade = 1 - 0.25 * np.clip(head, 0, 1)
    img = img * (1 - mask[..., None]) + (skin * shade[..., None]) * mask[..., None]
    hair = np.clip(mask * (yy < cy - ay * rng.uniform(0.45, 0.6)), 0, 1)
    img = img * (1 - hair[..., None]) + rng.uniform(0.05, 0.4) * hair[..., None]

    def blob(px, py, rx, ry, color, sharp=30):
        d = ((xx - px) / rx) ** 2 + ((yy - py) / ry) ** 2
        m = _sigmoid((1 - d) * sharp)
        return m[..., None], np.asarray(color)

    eye_y = cy - rng.uniform(0.1, 0.2)
    sep = rng.uniform(0.22, 0.3)
    iris = rng.uniform(0.0, 0.4, 3)
    for side in (-1, 1):
        for (px, py, rx, ry, col) in [
            (cx + side * sep, eye_y, 0.12, 0.06, [0.95, 0.95, 0.95]),
            (cx + side * sep, eye_y, 0.05, 0.05, iris),
            (cx + side * sep, eye_y - 0.13, 0.13, 0.025, [0.15, 0.1, 0.05]),
        ]:
            m, c = blob(px, py, rx, ry, col)
            img = img * (1 - m) + c * m
    m, c = blob(cx, cy + 0.1, 0.04, 0.12, skin * 0.8)
    img = img * (1 - m) + c * m
    m, c = blob(cx, cy + rng.uniform(0.35, 0.45), rng.uniform(0.15, 0.22), 0.05,
                [rng.uniform(0.5, 0.8), 0.2, 0.25])
    img = img * (1 - m) + c * m
    img = img + rng.normal(0, 0.01, img.shape)
    return np.clip(img, 0, 1)


def make_synthetic_dataset(out_dir, counts=None, size=128, seed=0):
    """Write PNG faces plus ``manifest.csv``; returns the manifest path."""
    counts = counts or {"train": 16, "val": 4, "test": 16}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for split in SPLITS:
        for i in range(counts.get(split, 0)):
            name = f"{split}_{i:04d}.png"
            write_image(out_dir / name, synthetic_face(size, rng))
            records.append((name, split))
    write_manifest(out_dir / "manifest.csv", records)
    return out_dir / "manifest.csv"
