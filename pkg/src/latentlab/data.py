"""Datasets: IDX files and three synthetic families.

Images are float32 (N, C, H, W) in [0, 1]; labels are int64 class ids.
The synthetic generators are fully determined by (kind, count, classes,
shape, seed) so runs can be reproduced from the manifest alone.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, DimensionMismatch, EmptyDataset, InvalidConfig, TruncatedFile

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.images.shape[0] == 0:
            raise EmptyDataset("dataset has no examples")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DimensionMismatch(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels"
            )

    def __len__(self):
        return self.images.shape[0]

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.num_classes)

    def batches(self, batch_size, rng=None):
        """Minibatch index iterator; shuffled when an rng is given."""
        order = np.arange(len(self))
        if rng is not None:
            rng.shuffle(order)
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            yield self.images[idx], self.labels[idx]


def load_idx(images_path, labels_path):
    """Big-endian IDX pair (the classic digit-dataset layout)."""
    img_blob = open(images_path, "rb").read()
    lab_blob = open(labels_path, "rb").read()
    if len(img_blob) < 16:
        raise TruncatedFile(f"{images_path}: header needs 16 bytes")
    if len(lab_blob) < 8:
        raise TruncatedFile(f"{labels_path}: header needs 8 bytes")

    magic, n, h, w = struct.unpack(">IIII", img_blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagic(f"{images_path}: magic {magic:#010x}, want {IDX_IMAGES_MAGIC:#010x}")
    lmagic, ln = struct.unpack(">II", lab_blob[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise BadMagic(f"{labels_path}: magic {lmagic:#010x}, want {IDX_LABELS_MAGIC:#010x}")
    if n != ln:
        raise DimensionMismatch(f"{n} images but {ln} labels")
    if len(img_blob) - 16 != n * h * w:
        raise TruncatedFile(f"{images_path}: expected {n * h * w} pixel bytes")
    if len(lab_blob) - 8 != ln:
        raise TruncatedFile(f"{labels_path}: expected {ln} label bytes")

    pixels = np.frombuffer(img_blob, dtype=np.uint8, offset=16).reshape(n, 1, h, w)
    labels = np.frombuffer(lab_blob, dtype=np.uint8, offset=8).astype(np.int64)
    images = (pixels.astype(np.float32) / 255.0)
    return Dataset(images, labels, int(labels.max()) + 1)


def _grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return ys.astype(np.float64), xs.astype(np.float64)


def _blobs(rng, count, k, c, h, w):
    # class id keys the blob size; position is a nuisance variable, so the
    # cue survives the model's global pooling (position alone would not)
    ys, xs = _grid(h, w)
    scale = min(h, w)
    sigmas = scale * (0.08 + 0.19 * np.arange(k) / max(k - 1, 1))
    labels = rng.integers(0, k, size=count)
    out = np.empty((count, c, h, w), dtype=np.float32)
    for j in range(count):
        sig = sigmas[labels[j]]
        jy = h / 2 + rng.uniform(-h / 4, h / 4)
        jx = w / 2 + rng.uniform(-w / 4, w / 4)
        bump = 0.9 * np.exp(-((ys - jy) ** 2 + (xs - jx) ** 2) / (2 * sig**2))
        img = bump + rng.normal(scale=0.10, size=(c, h, w))
        out[j] = np.clip(img, 0.0, 1.0)
    return out, labels


def _rings(rng, count, k, c, h, w):
    ys, xs = _grid(h, w)
    r = np.sqrt((ys - h / 2) ** 2 + (xs - w / 2) ** 2)
    radii = (np.arange(k) + 1.0) / (k + 1.0) * (min(h, w) / 2.0)
    labels = rng.integers(0, k, size=count)
    out = np.empty((count, c, h, w), dtype=np.float32)
    for j in range(count):
        lab = labels[j]
        ring = 0.85 * np.exp(-((r - radii[lab]) ** 2) / (2 * 1.1**2))
        img = ring + rng.normal(scale=0.12, size=(c, h, w))
        out[j] = np.clip(img, 0.0, 1.0)
    return out, labels


def _textures(rng, count, k, c, h, w):
    ys, xs = _grid(h, w)
    labels = rng.integers(0, k, size=count)
    out = np.empty((count, c, h, w), dtype=np.float32)
    for j in range(count):
        lab = labels[j]
        theta = np.pi * lab / k
        freq = 2 * np.pi * (1.5 + lab % 3) / max(h, w)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.42 * np.sin(freq * (xs * np.cos(theta) + ys * np.sin(theta)) + phase)
        img = wave + rng.normal(scale=0.10, size=(c, h, w))
        out[j] = np.clip(img, 0.0, 1.0)
    return out, labels


_KINDS = {"blobs": _blobs, "rings": _rings, "textures": _textures}


def synth_dataset(kind, count, num_classes, input_shape, seed):
    if kind not in _KINDS:
        raise InvalidConfig(f"unknown synthetic kind {kind!r}; have {sorted(_KINDS)}")
    if count < 1:
        raise InvalidConfig(f"count must be >= 1, got {count}")
    if num_classes < 2:
        raise InvalidConfig(f"need at least 2 classes, got {num_classes}")
    c, h, w = (int(v) for v in input_shape)
    rng = np.random.default_rng(seed)
    images, labels = _KINDS[kind](rng, count, num_classes, c, h, w)
    return Dataset(images, labels.astype(np.int64), num_classes)
