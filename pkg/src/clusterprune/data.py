"""Datasets: IDX files, a seeded synthetic task, and batch augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .rng import Rng

# IDX type code -> (numpy big-endian dtype)
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {v: k for k, v in IDX_TYPES.items()}


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, M) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (n, H, W, M), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)


def read_idx(path) -> np.ndarray:
    """Parse one IDX file into an array of its native dtype."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for IDX magic", 0)
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad IDX magic {raw[:4].hex()}", 0)
    if raw[2] not in IDX_TYPES:
        raise FormatError(f"{path}: unknown IDX type code 0x{raw[2]:02x}", 2)
    dtype, ndim = IDX_TYPES[raw[2]], raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension table", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header < need:
        raise FormatError(f"{path}: expected {need} data bytes, found {len(raw) - header}", len(raw))
    if len(raw) - header > need:
        raise FormatError(f"{path}: {len(raw) - header - need} trailing bytes", header + need)
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder(">") if array.dtype.itemsize > 1 else array.dtype
    if np.dtype(dtype) not in IDX_CODES:
        raise FormatError(f"dtype {array.dtype} has no IDX type code")
    head = bytes([0, 0, IDX_CODES[np.dtype(dtype)], array.ndim])
    head += struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(head + array.astype(dtype).tobytes())


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    """Images ``(n, H, W)`` or ``(n, H, W, M)`` plus labels ``(n,)``.

    Unsigned byte pixels are scaled by 1/255.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise FormatError(f"{images_path}: expected 3 or 4 image dimensions, got {images.ndim}", 3)
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected 1 label dimension, got {labels.ndim}", 3)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    labels = labels.astype(np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        bad = int(labels[(labels < 0) | (labels >= num_classes)][0])
        raise DataError(f"label {bad} outside [0, {num_classes})")
    scale = 1.0 / 255.0 if images.dtype == np.uint8 else 1.0
    return Dataset(images.astype(np.float64) * scale, labels, num_classes, split)


def _prototypes(rng: Rng, classes: int, size: int) -> np.ndarray:
    """One smooth pattern per class: a few Gaussian blobs and oriented bars."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    protos = np.zeros((classes, size, size))
    for c in range(classes):
        r = rng.derive(c)
        img = np.zeros((size, size))
        for cy, cx, s in r.uniform((2, 3), 0.15, 0.85):
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (0.06 + 0.08 * s) ** 2))
        theta, offset = r.uniform(2)
        dist = np.cos(np.pi * theta) * (xx - 0.5) + np.sin(np.pi * theta) * (yy - 0.5) - (offset - 0.5) * 0.6
        img += np.exp(-dist ** 2 / (2 * 0.05 ** 2))
        protos[c] = img / img.max()
    return protos


def synth_dataset(seed: int, n: int, classes: int = 10, difficulty: float = 0.5,
                  size: int = 16, split: str = "train") -> Dataset:
    """Class prototypes plus per-sample shift, contrast change, and noise.

    Prototypes depend only on ``seed``, so train and test splits built with the
    same seed share them. ``difficulty`` in [0, 1] scales the corruption; at 0
    every sample equals its class prototype. Classes are balanced (sizes differ
    by at most one) and the sample order is shuffled.
    """
    if classes < 2:
        raise DataError(f"need at least 2 classes, got {classes}")
    if n < 1:
        raise DataError(f"need at least one sample, got {n}")
    if not 0 <= difficulty <= 1:
        raise DataError(f"difficulty must be in [0, 1], got {difficulty}")
    rng = Rng(seed)
    protos = _prototypes(rng.derive(0), classes, size)
    r = rng.derive(1, 0 if split == "train" else 1)
    labels = np.arange(n) % classes
    labels = labels[r.permutation(n)]
    max_shift = int(round(3 * difficulty))
    shifts = r.integers(-max_shift, max_shift + 1, size=(n, 2))
    contrast = 1.0 - 0.5 * difficulty * r.uniform(n)
    noise = r.normal((n, size, size), scale=0.35 * difficulty)
    images = np.empty((n, size, size))
    for i in range(n):
        img = np.roll(protos[labels[i]], tuple(shifts[i]), axis=(0, 1))
        images[i] = img * contrast[i] + noise[i]
    images = np.clip(images, 0.0, 1.0)[..., None]
    return Dataset(images, labels.astype(np.int64), classes, split)


def augment(images: np.ndarray, rng: Rng, pad: int = 4, flip: bool = True) -> np.ndarray:
    """Zero-pad by ``pad``, take a random crop of the original size, random horizontal flip."""
    n, h, w, _ = images.shape
    out = images
    if pad:
        padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        dy = rng.integers(0, 2 * pad + 1, size=n)
        dx = rng.integers(0, 2 * pad + 1, size=n)
        out = np.stack([padded[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    if flip:
        mask = rng.uniform(n) < 0.5
        out = out.copy()
        out[mask] = out[mask, :, ::-1]
    return out
