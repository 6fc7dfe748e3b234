"""Small-image datasets: IDX (MNIST-style) and CIFAR binary readers, a seeded
synthetic blob generator, batching and flip/pad-crop augmentation.

All images are stored as float32 ``[S, 3, H, W]`` arrays, scaled to [0, 1]
and then normalized per channel with ``(x - NORM_MEAN) / NORM_STD``.
"""

from __future__ import annotations

import colorsys
import gzip
import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, ConsistencyError, FormatError

NORM_MEAN = 0.5
NORM_STD = 0.5

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_IMAGE_BYTES = 3 * 32 * 32
CIFAR_RECORD_BYTES = 1 + CIFAR_IMAGE_BYTES
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass
class Dataset:
    images: np.ndarray  # float32 [S, 3, H, W], normalized
    labels: np.ndarray  # int64 [S]
    class_count: int
    name: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ConfigError(f"images must be [S, 3, H, W], got {self.images.shape}")
        if self.images.shape[2] != self.images.shape[3]:
            raise ConfigError(f"images must be square, got {self.images.shape[2:]}")
        if len(self.images) < 1:
            raise ConfigError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ConfigError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], self.class_count, self.name)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def normalize(pixels: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to the normalized range."""
    return ((pixels - NORM_MEAN) / NORM_STD).astype(np.float32)


def resize_nearest(images: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of ``[S, C, H, W]`` to ``[S, C, size, size]``."""
    h, w = images.shape[-2:]
    if (h, w) == (size, size):
        return images
    rows = np.arange(size) * h // size
    cols = np.arange(size) * w // size
    return np.ascontiguousarray(images[..., rows[:, None], cols[None, :]])


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _idx_header(raw: bytes, magic: int, ndims: int, what: str) -> tuple[int, ...]:
    header_len = 4 + 4 * ndims
    if len(raw) < header_len:
        raise FormatError(f"{what}: file too short for IDX header", offset=len(raw))
    found, *dims = struct.unpack(f">I{ndims}I", raw[:header_len])
    if found != magic:
        raise FormatError(f"{what}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    expected = header_len + math.prod(dims)
    if len(raw) < expected:
        raise FormatError(
            f"{what}: truncated, expected {expected} bytes, found {len(raw)}", offset=len(raw)
        )
    return tuple(dims)


def load_idx(images_path, labels_path, image_size: int | None = None,
             class_count: int | None = None, name: str = "idx") -> Dataset:
    """Read an IDX image/label file pair (optionally gzipped).

    Grayscale is replicated to three channels. With ``image_size`` the images
    are nearest-neighbour resized, e.g. 28 -> 32.
    """
    raw_images = _read_bytes(images_path)
    raw_labels = _read_bytes(labels_path)
    n, rows, cols = _idx_header(raw_images, IDX_IMAGES_MAGIC, 3, "images")
    (n_labels,) = _idx_header(raw_labels, IDX_LABELS_MAGIC, 1, "labels")
    if n != n_labels:
        raise ConsistencyError(f"{n} images but {n_labels} labels")
    pixels = np.frombuffer(raw_images, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(raw_labels, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    gray = pixels.reshape(n, 1, rows, cols).astype(np.float32) / 255.0
    images = normalize(np.repeat(gray, 3, axis=1))
    if image_size is not None:
        images = resize_nearest(images, image_size)
    if class_count is None:
        class_count = max(10, int(labels.max()) + 1) if n else 10
    return Dataset(images, labels, class_count, name)


def parse_cifar_records(raw: bytes, what: str = "cifar") -> tuple[np.ndarray, np.ndarray]:
    """Split raw 3073-byte records into uint8 ``[S, 3, 32, 32]`` images and labels."""
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
        whole = len(raw) // CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES
        raise FormatError(
            f"{what}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}",
            offset=whole,
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar_binary(directory, split: str = "train", image_size: int | None = None,
                      name: str = "cifar10") -> Dataset:
    """Load the CIFAR-10 binary release (``data_batch_*.bin`` / ``test_batch.bin``)."""
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    directory = Path(directory)
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    chunks, labels = [], []
    for fname in files:
        path = directory / fname
        if not path.exists():
            if split == "train" and chunks:
                break
            raise FileNotFoundError(path)
        imgs, labs = parse_cifar_records(path.read_bytes(), what=str(path))
        chunks.append(imgs)
        labels.append(labs)
    images = normalize(np.concatenate(chunks).astype(np.float32) / 255.0)
    if image_size is not None:
        images = resize_nearest(images, image_size)
    return Dataset(images, np.concatenate(labels), 10, f"{name}-{split}")


def load_directory(directory, image_size: int | None = None, split: str = "train") -> Dataset:
    """Detect CIFAR binary or IDX files in ``directory`` and load the requested split."""
    directory = Path(directory)
    if (directory / CIFAR_TRAIN_FILES[0]).exists() or (directory / CIFAR_TEST_FILES[0]).exists():
        return load_cifar_binary(directory, split, image_size)
    prefix = "train" if split == "train" else "t10k"
    for suffix in ("", ".gz"):
        imgs = directory / f"{prefix}-images-idx3-ubyte{suffix}"
        labs = directory / f"{prefix}-labels-idx1-ubyte{suffix}"
        if imgs.exists() and labs.exists():
            return load_idx(imgs, labs, image_size, name=f"idx-{split}")
    raise FileNotFoundError(f"no CIFAR binary or IDX {split} files found in {directory}")


def _class_prototypes(classes: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    # Fixed per class index so that splits drawn with different seeds agree.
    angles = 2 * np.pi * np.arange(classes) / classes
    radius = size / 4
    centers = np.stack([size / 2 + radius * np.sin(angles), size / 2 + radius * np.cos(angles)], 1)
    colors = np.array([colorsys.hsv_to_rgb((c * 0.618034) % 1.0, 0.9, 1.0) for c in range(classes)])
    return centers, colors


def synthetic_blobs(classes: int = 10, per_class: int = 100, size: int = 32, seed: int = 0,
                    noise: float = 0.25) -> Dataset:
    """One Gaussian blob per image at a class-specific position and colour over
    uniform noise. Deterministic in ``seed``; class layout does not depend on it."""
    if classes < 1 or per_class < 1 or size < 4:
        raise ConfigError("synthetic_blobs needs classes >= 1, per_class >= 1, size >= 4")
    rng = np.random.default_rng(seed)
    centers, colors = _class_prototypes(classes, size)
    sigma = size / 8
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    jitter = rng.uniform(-size / 16, size / 16, size=(n, 2))
    cy = centers[labels, 0] + jitter[:, 0]
    cx = centers[labels, 1] + jitter[:, 1]
    blob = np.exp(-((ys[None] - cy[:, None, None]) ** 2 + (xs[None] - cx[:, None, None]) ** 2)
                  / (2 * sigma**2))
    background = rng.uniform(0.0, noise, size=(n, 3, size, size))
    pixels = np.clip(background + blob[:, None] * colors[labels][:, :, None, None], 0.0, 1.0)
    return Dataset(normalize(pixels), labels, classes, f"blobs-{classes}x{per_class}-s{seed}")


def flip_horizontal(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images[..., ::-1])


def augment(batch: Batch, flip: bool = False, crop_pad: int = 0, seed: int = 0) -> Batch:
    """Random horizontal flip (p=0.5) and zero-pad-then-random-crop."""
    size = batch.images.shape[-1]
    if crop_pad < 0 or crop_pad >= size:
        raise ConfigError(f"crop_pad must lie in [0, {size}), got {crop_pad}")
    rng = np.random.default_rng(seed)
    images = batch.images.copy()
    b = len(images)
    if flip:
        mask = rng.random(b) < 0.5
        images[mask] = images[mask][..., ::-1]
    if crop_pad:
        p = crop_pad
        padded = np.pad(images, ((0, 0), (0, 0), (p, p), (p, p)))
        offsets = rng.integers(0, 2 * p + 1, size=(b, 2))
        for i, (dy, dx) in enumerate(offsets):
            images[i] = padded[i, :, dy:dy + size, dx:dx + size]
    return Batch(images, batch.labels.copy())


def iterate_epoch(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None
                  ) -> Iterator[Batch]:
    """Yield batches covering every sample once; the last batch may be short.

    ``shuffle_seed=None`` keeps dataset order.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(dataset.images[idx], dataset.labels[idx])
