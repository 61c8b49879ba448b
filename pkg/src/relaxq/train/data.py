"""Datasets: IDX (MNIST) files and synthetic Gaussian blobs."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from ..autodiff import RngStream

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) or (n, features), values in [-1, 1]
    labels: np.ndarray  # (n,) int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, index, split: str | None = None) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], split or self.split, self.num_classes)

    def split_tail(self, n_tail: int, tail_split: str = "val") -> tuple["Dataset", "Dataset"]:
        """Hold out the last ``n_tail`` samples."""
        if not 0 < n_tail < len(self):
            raise ValueError(f"cannot hold out {n_tail} of {len(self)} samples")
        cut = len(self) - n_tail
        return self.subset(slice(0, cut)), self.subset(slice(cut, None), tail_split)

    def batches(self, batch_size: int, rng: RngStream | None = None, dtype=np.float64):
        """Yield (x, y) minibatches, shuffled when ``rng`` is given."""
        n = len(self)
        order = rng.generator.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx].astype(dtype, copy=False), self.labels[idx]


def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Raw uint8 array from an IDX images (0x803) or labels (0x801) file."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, count = struct.unpack(">II", raw[:8])
    if magic == IDX_IMAGES:
        if len(raw) < 16:
            raise IdxFormatError(f"{path}: truncated image header ({len(raw)} bytes)")
        rows, cols = struct.unpack(">II", raw[8:16])
        shape, offset = (count, rows, cols), 16
    elif magic == IDX_LABELS:
        shape, offset = (count,), 8
    else:
        raise IdxFormatError(f"{path}: bad magic number 0x{magic:08x}")
    expected = int(np.prod(shape))
    body = raw[offset:]
    if len(body) != expected:
        raise IdxFormatError(f"{path}: header declares {expected} bytes of data, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(shape)


def scale_pixels(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Map [0, 255] linearly onto [-1, 1]."""
    return (pixels.astype(np.float64) * (2.0 / 255.0) - 1.0).astype(dtype)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise IdxFormatError(f"expected an images file and a labels file, got shapes {images.shape}, {labels.shape}")
    if len(images) != len(labels):
        raise IdxFormatError(f"image count {len(images)} does not match label count {len(labels)}")
    return Dataset(scale_pixels(images)[:, None], labels.astype(np.int64), split,
                   num_classes=max(10, int(labels.max()) + 1))


_MNIST_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory, stem):
    candidates = [stem, stem.replace("-idx", ".idx")]
    for c in candidates:
        for suffix in ("", ".gz"):
            path = os.path.join(directory, c + suffix)
            if os.path.exists(path):
                return path
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory, split: str = "train") -> Dataset:
    img, lab = _MNIST_NAMES[split]
    return load_idx(_find(directory, img), _find(directory, lab), split)


def make_synthetic(classes: int, n: int, seed: int, separation: float = 6.0, dim: int = 2) -> Dataset:
    """Gaussian blobs with centres on a circle, pairwise at least
    ``separation`` noise standard deviations apart.

    Noise draws are rejected beyond radius 0.48 * separation, so the classes
    are separable with a margin.  Features are rescaled into [-1, 1] and
    returned with shape (n, dim).
    """
    if n <= 0:
        raise ValueError(f"make_synthetic: n must be positive, got {n}")
    if classes < 2 or dim < 2:
        raise ValueError("make_synthetic: need at least 2 classes and 2 dimensions")
    rng = np.random.Generator(np.random.Philox(key=seed))
    radius = separation / (2 * np.sin(np.pi / classes)) if classes > 2 else separation / 2
    angles = 2 * np.pi * np.arange(classes) / classes
    centres = np.zeros((classes, dim))
    centres[:, 0], centres[:, 1] = radius * np.cos(angles), radius * np.sin(angles)
    labels = rng.integers(0, classes, size=n)
    noise = rng.standard_normal((n, dim))
    limit = 0.48 * separation
    bad = np.linalg.norm(noise, axis=1) > limit
    while bad.any():
        noise[bad] = rng.standard_normal((int(bad.sum()), dim))
        bad = np.linalg.norm(noise, axis=1) > limit
    x = centres[labels] + noise
    x /= np.abs(x).max()
    return Dataset(x, labels.astype(np.int64), "train", classes)
