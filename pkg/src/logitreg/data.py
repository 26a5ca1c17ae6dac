"""Datasets, label distributions and augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    examples: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        x = np.array(self.examples, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} examples but {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("example values must lie in [0, 1]")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "examples", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.examples.shape[1:])

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.examples[idx], self.labels[idx], self.num_classes, self.split)


# -- synthesis -----------------------------------------------------------------


def _balanced_labels(m: int, num_classes: int, rng) -> np.ndarray:
    labels = np.arange(m) % num_classes
    return labels[rng.permutation(m)]


def _blobs(m, num_classes, structure, rng, dim=2, spread=0.15):
    centers = structure.uniform(-1.0, 1.0, size=(num_classes, dim))
    angle = 2 * np.pi * np.arange(num_classes) / num_classes
    centers[:, 0] = np.cos(angle)
    if dim > 1:
        centers[:, 1] = np.sin(angle)
    labels = _balanced_labels(m, num_classes, rng)
    x = centers[labels] + spread * rng.normal(size=(m, dim))
    # fixed affine map (not data-dependent) so separate splits share coordinates
    return np.clip((x + 1.5) / 3.0, 0.0, 1.0), labels


def _two_rings(m, num_classes, structure, rng, noise=0.05):
    labels = _balanced_labels(m, num_classes, rng)
    radius = (labels + 1.0) / num_classes
    theta = rng.uniform(0, 2 * np.pi, size=m)
    r = radius + noise * rng.normal(size=m)
    x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return np.clip((x + 1.2) / 2.4, 0.0, 1.0), labels


def glyph_prototypes(num_classes: int, size: int, rng) -> np.ndarray:
    """One smooth random three-stroke pattern per class, values in [0, 1]."""
    protos = np.zeros((num_classes, size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    for c in range(num_classes):
        img = np.zeros((size, size))
        for _ in range(3):
            y0, x0, y1, x1 = rng.uniform(1, size - 2, size=4)
            for t in np.linspace(0.0, 1.0, 4 * size):
                cy, cx = y0 + t * (y1 - y0), x0 + t * (x1 - x0)
                img = np.maximum(img, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 0.8))
        protos[c] = img
    return protos


def _glyphs(m, num_classes, structure, rng, size=8, noise=0.15, shift=1):
    protos = glyph_prototypes(num_classes, size, structure)
    labels = _balanced_labels(m, num_classes, rng)
    pad = np.pad(protos, ((0, 0), (shift, shift), (shift, shift)))
    offs = rng.integers(0, 2 * shift + 1, size=(m, 2))
    gain = rng.uniform(0.6, 1.0, size=m)
    x = np.empty((m, 1, size, size))
    for i in range(m):
        dy, dx = offs[i]
        x[i, 0] = gain[i] * pad[labels[i], dy : dy + size, dx : dx + size]
    x += noise * rng.normal(size=x.shape)
    return np.clip(x, 0.0, 1.0), labels


_KINDS = {"blobs": _blobs, "two-rings": _two_rings, "glyphs": _glyphs}


def make_synthetic_dataset(
    kind: str, m: int, num_classes: int, seed: int, split: str = "train", sample_seed=None, **options
) -> Dataset:
    """Deterministic synthetic data in [0, 1].

    ``blobs`` are Gaussian clusters (options ``dim``, ``spread``), ``two-rings``
    are concentric noisy rings in the plane (``noise``), and ``glyphs`` are
    one-channel ``size`` x ``size`` images of per-class stroke patterns with
    jitter, gain variation and pixel noise. Classes are balanced to within one
    example.

    Class structure (blob centers, glyph shapes) is drawn from ``seed`` alone;
    passing ``sample_seed`` draws the examples from an independent stream, so
    a train and a test split built with the same ``seed`` share classes.
    """
    if kind not in _KINDS:
        raise ValueError(f"unsupported dataset kind {kind!r}; choose from {sorted(_KINDS)}")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if m < num_classes:
        raise ValueError("m must be at least the class count")
    structure = np.random.default_rng(seed)
    rng = structure if sample_seed is None else np.random.default_rng([seed, sample_seed])
    x, y = _KINDS[kind](m, num_classes, structure, rng, **options)
    return Dataset(x, y, num_classes, split)


def train_test_split_synthetic(kind, m_train, m_test, num_classes, seed, **options) -> tuple[Dataset, Dataset]:
    train = make_synthetic_dataset(kind, m_train, num_classes, seed, "train", sample_seed=0, **options)
    test = make_synthetic_dataset(kind, m_test, num_classes, seed, "test", sample_seed=1, **options)
    return train, test


# -- IDX files -------------------------------------------------------------------


def _read_idx(path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{path}: bad magic {found}, expected {magic}")
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < need:
        raise DataFormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    return np.frombuffer(payload[:need], dtype=np.uint8).reshape(dims)


def load_idx_dataset(
    image_path, label_path, num_classes: int = 10, split: str = "train", channel_axis: bool = False
) -> Dataset:
    """Read an MNIST-style IDX image/label pair; pixels are scaled to [0, 1].

    Examples have shape (m, rows, cols), or (m, 1, rows, cols) with
    ``channel_axis`` for the conv model.
    """
    images = _read_idx(image_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(label_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"image count {images.shape[0]} != label count {labels.shape[0]}")
    x = images.astype(np.float64) / 255.0
    if channel_axis:
        x = x[:, None]
    return Dataset(x, labels.astype(np.int64), num_classes, split)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX layout (images: 3-D, labels: 1-D)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = 0x0800 | arr.ndim
    header = struct.pack(f">I{arr.ndim}I", magic, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


# -- label distributions ------------------------------------------------------------


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def smooth_labels(labels, num_classes: int, s: float) -> np.ndarray:
    """Target distribution with ``1 - s`` on the true class and ``s / (C - 1)`` elsewhere."""
    if not 0.0 <= s <= 1.0 - 1.0 / num_classes + 1e-12:
        raise ValueError(f"smoothing strength {s} outside [0, {1 - 1 / num_classes}]")
    labels = np.asarray(labels, dtype=np.int64)
    if abs(s - (1.0 - 1.0 / num_classes)) <= 1e-12:
        # 1 - s and s / (C - 1) round differently in floating point; the limit is uniform
        return np.full((labels.size, num_classes), 1.0 / num_classes)
    probs = np.full((labels.size, num_classes), s / (num_classes - 1))
    probs[np.arange(labels.size), labels] = 1.0 - s
    return probs


# -- paired-example mixing ------------------------------------------------------------


@dataclass(frozen=True)
class MixConfig:
    mode: str = "off"
    a: float = 1.0

    def __post_init__(self):
        if self.mode not in ("mixup", "vh-mixup", "off"):
            raise ValueError(f"unknown mix mode {self.mode!r}")
        if self.a <= 0:
            raise ValueError("beta parameter must be positive")


def _expand(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def mix_examples(batch_a, batch_b, config: MixConfig, seed=None, lam=None, splits=None):
    """Blend two (examples, probs) batches pairwise.

    ``lam`` overrides the Beta(a, a) draw (scalar or one value per pair);
    ``splits`` overrides the vh-mixup (row, column) split fractions, shape (B, 2).

    For vh-mixup, a vertical composite V (top rows from a) and a horizontal
    composite H (left columns from a) are built per pair, and the output is
    ``lam * V + (1 - lam) * H``. The weight given to a's label is the fraction
    of output pixel mass that came from a.
    """
    xa, pa = (np.asarray(v, dtype=np.float64) for v in batch_a)
    xb, pb = (np.asarray(v, dtype=np.float64) for v in batch_b)
    if xa.shape != xb.shape or pa.shape != pb.shape or xa.shape[0] != pa.shape[0]:
        raise ValueError("mix_examples: batch shapes disagree")
    if config.mode == "off":
        return xa.copy(), pa.copy()
    n = xa.shape[0]
    rng = np.random.default_rng(seed)
    if lam is None:
        lam = rng.beta(config.a, config.a, size=n)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,))
    if config.mode == "mixup":
        lx = _expand(lam, xa.ndim)
        x = lx * xa + (1 - lx) * xb
        p = lam[:, None] * pa + (1 - lam[:, None]) * pb
        return x, p

    if xa.ndim < 3:
        raise ValueError("vh-mixup needs image-shaped examples (..., H, W)")
    h, w = xa.shape[-2:]
    if splits is None:
        splits = rng.uniform(0.25, 0.75, size=(n, 2))
    splits = np.asarray(splits, dtype=np.float64)
    rows = np.clip(np.rint(splits[:, 0] * h).astype(int), 0, h)
    cols = np.clip(np.rint(splits[:, 1] * w).astype(int), 0, w)
    row_mask = (np.arange(h)[None, :] < rows[:, None])[:, :, None]  # B, H, 1
    col_mask = (np.arange(w)[None, :] < cols[:, None])[:, None, :]  # B, 1, W
    shape = (n,) + (1,) * (xa.ndim - 3) + (h, w)
    v_mask = np.broadcast_to(row_mask, (n, h, w)).reshape(shape)
    h_mask = np.broadcast_to(col_mask, (n, h, w)).reshape(shape)
    vert = np.where(v_mask, xa, xb)
    horiz = np.where(h_mask, xa, xb)
    lx = _expand(lam, xa.ndim)
    x = lx * vert + (1 - lx) * horiz
    wa = lam * rows / h + (1 - lam) * cols / w
    p = wa[:, None] * pa + (1 - wa[:, None]) * pb
    return x, p


# -- standard augmentation --------------------------------------------------------------


def standard_augment(batch, pad: int = 4, flip: bool = True, seed=None, offsets=None, flips=None) -> np.ndarray:
    """Zero-pad, random-crop back to size, and optionally mirror left-right.

    ``offsets`` (B, 2) and ``flips`` (B,) override the random draws.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 3:
        raise ValueError("standard_augment expects image-shaped input (..., H, W)")
    h, w = x.shape[-2:]
    if pad >= h or pad >= w:
        raise ValueError("pad must be smaller than the image extent")
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    if offsets is None:
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    if flips is None:
        flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    xp = np.pad(x, widths)
    out = np.empty_like(x)
    for i in range(n):
        dy, dx = offsets[i]
        crop = xp[i, ..., dy : dy + h, dx : dx + w]
        out[i] = crop[..., ::-1] if flips[i] else crop
    return out


def batch_iter(dataset: Dataset, batch_size: int = 128, seed=None, epoch: int = 0, shuffle: bool = True) -> Iterator[np.ndarray]:
    """Yield index arrays covering one epoch; the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    m = len(dataset)
    if m == 0:
        raise ValueError("empty dataset")
    if shuffle and seed is not None:
        order = np.random.default_rng([seed, epoch]).permutation(m)
    else:
        order = np.arange(m)
    for start in range(0, m, batch_size):
        yield order[start : start + batch_size]
