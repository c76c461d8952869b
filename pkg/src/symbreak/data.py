"""Dataset ingestion: IDX files, raw CIFAR-10 batches, synthetic shift task."""

import struct
from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixels


class BadMagic(ValueError):
    pass


class Truncated(ValueError):
    pass


class CountMismatch(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W, C] float32
    labels: np.ndarray  # [N] int64
    n_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatch(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        if self.labels.size and self.labels.max() >= self.n_classes:
            raise ValueError("label out of range")

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.n_classes)

    def split(self, test_fraction, seed=0):
        n = len(self.images)
        n_test = int(round(n * test_fraction))
        perm = Generator(Philox(key=[seed, 0x5B17])).permutation(n)
        test, train = perm[:n_test], perm[n_test:]
        return (
            Dataset(self.images[train], self.labels[train], self.n_classes),
            Dataset(self.images[test], self.labels[test], self.n_classes),
        )


def _read_idx_header(raw, path, expect_magic, n_dims):
    if len(raw) < 4 * (1 + n_dims):
        raise Truncated(f"{path}: header cut short")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expect_magic:
        raise BadMagic(f"{path}: magic {magic:#010x}, expected {expect_magic:#010x}")
    dims = struct.unpack(f">{n_dims}i", raw[4 : 4 + 4 * n_dims])
    return dims, raw[4 + 4 * n_dims :]


def load_idx(images_path, labels_path):
    """Big-endian IDX image/label pair -> floats in [0,1] and int labels."""
    raw = open(images_path, "rb").read()
    (n, h, w), payload = _read_idx_header(raw, images_path, IDX_IMAGES_MAGIC, 3)
    if len(payload) != n * h * w:
        raise Truncated(f"{images_path}: {len(payload)} pixel bytes, expected {n * h * w}")
    images = np.frombuffer(payload, np.uint8).reshape(n, h, w, 1).astype(np.float32) / 255.0

    raw = open(labels_path, "rb").read()
    (n_lbl,), payload = _read_idx_header(raw, labels_path, IDX_LABELS_MAGIC, 1)
    if len(payload) != n_lbl:
        raise Truncated(f"{labels_path}: {len(payload)} label bytes, expected {n_lbl}")
    if n_lbl != n:
        raise CountMismatch(f"{n} images vs {n_lbl} labels")
    labels = np.frombuffer(payload, np.uint8).astype(np.int64)
    return Dataset(images, labels, int(labels.max()) + 1 if n else 10)


def write_idx(images, labels, images_path, labels_path):
    """Inverse of load_idx, for fixtures and round-trip checks."""
    arr = np.clip(np.asarray(images) * 255.0, 0, 255).astype(np.uint8)
    n, h, w = arr.shape[:3]
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, h, w))
        f.write(arr.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABELS_MAGIC, len(labels)))
        f.write(np.asarray(labels, np.uint8).tobytes())


def load_cifar_batches(paths):
    """Raw CIFAR-10 binary batches (3073-byte records)."""
    images, labels = [], []
    for path in paths:
        raw = open(path, "rb").read()
        if len(raw) % CIFAR_RECORD_BYTES:
            raise Truncated(f"{path}: {len(raw)} bytes is not a whole number of records")
        rec = np.frombuffer(raw, np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(rec[:, 0].astype(np.int64))
        planes = rec[:, 1:].reshape(-1, 3, 32, 32)  # RGB planes
        images.append(planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0)
    return Dataset(np.concatenate(images), np.concatenate(labels), 10)


def gen_synthetic_shift(n, h, w, c, classes, seed, noise=0.05, n_modes=4):
    """Translation-invariant toy task: smooth class templates under cyclic shifts.

    Each sample is its class template rolled by a uniform random 2-D offset
    plus i.i.d. Gaussian pixel noise, so every pixel's marginal distribution
    is identical across positions by construction.
    """
    if h < 4 or w < 4:
        raise ValueError("need at least 4x4 spatial extent")
    gen = Generator(Philox(key=[seed, 0x5F17]))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    templates = np.zeros((classes, h, w, c), np.float32)
    for cls in range(classes):
        field = np.zeros((h, w))
        for _ in range(n_modes):
            fy, fx = gen.integers(1, 3, size=2)
            sy, sx = gen.choice([-1, 1], size=2)
            phase = gen.uniform(0, 2 * np.pi)
            field += gen.normal(0, 1) * np.cos(
                2 * np.pi * (sy * fy * yy / h + sx * fx * xx / w) + phase
            )
        field = (field - field.mean()) / max(field.std(), 1e-9)
        for ch in range(c):
            templates[cls, :, :, ch] = 0.5 + 0.15 * field

    labels = gen.integers(0, classes, size=n)
    offsets = gen.integers(0, (h, w), size=(n, 2))
    images = np.empty((n, h, w, c), np.float32)
    for i in range(n):
        rolled = np.roll(templates[labels[i]], tuple(offsets[i]), axis=(0, 1))
        images[i] = rolled + noise * gen.standard_normal((h, w, c))
    return Dataset(images, labels.astype(np.int64), classes)
