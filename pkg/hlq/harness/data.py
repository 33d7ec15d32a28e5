"""Datasets: a seeded synthetic 10-class image set and a raw binary image format.

Binary layout, little-endian:
    magic "HLQD" | version u16 | count u32 | channels u16 | height u16 | width u16 |
    num_classes u16 | pixels u8 * (count * C * H * W) | labels u8 * count
"""
import logging
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from config.settings import Config
from hlq.errors.handlers import DatasetError, ParameterError

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sHIHHHH")
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class Dataset:
    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.dtype != np.uint8:
            raise DatasetError(f"pixels must be uint8 (N, C, H, W), got {self.pixels.dtype} {self.pixels.shape}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise DatasetError(f"{self.labels.shape[0]} labels for {self.pixels.shape[0]} images")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.pixels.shape[0]

    @property
    def sample_shape(self):
        return tuple(self.pixels.shape[1:])

    @cached_property
    def images(self):
        return ((self.pixels.astype(np.float32) / 255.0 - PIXEL_MEAN) / PIXEL_STD).astype(np.float32)

    def subset(self, index):
        return Dataset(self.pixels[index], self.labels[index], self.num_classes)

    def split(self, val_fraction, seed=0):
        """Seeded train/validation split."""
        if not 0 < val_fraction < 1:
            raise ParameterError(f"validation fraction must lie in (0, 1), got {val_fraction}")
        order = np.random.default_rng([seed, 0x5EED]).permutation(len(self))
        cut = len(self) - max(1, int(round(len(self) * val_fraction)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))


def _prototypes(num_classes, channels, size, rng):
    grid = np.arange(size) / size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    protos = np.zeros((num_classes, channels, size, size))
    for c in range(num_classes):
        for ch in range(channels):
            for _ in range(3):
                fy, fx = rng.integers(0, 3, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                protos[c, ch] += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return protos


def synthetic_dataset(num_samples=2048, num_classes=10, image_size=16, channels=1, noise=0.6,
                      max_shift=2, seed=0):
    """Smooth class prototypes, randomly shifted, with Gaussian pixel noise."""
    if num_samples <= 0 or num_classes <= 1 or num_classes > 256:
        raise ParameterError("need a positive sample count and 2..256 classes")
    rng = np.random.default_rng([seed, num_classes, image_size])
    protos = _prototypes(num_classes, channels, image_size, rng)
    labels = np.arange(num_samples) % num_classes
    rng.shuffle(labels)
    images = protos[labels]
    shifts = rng.integers(-max_shift, max_shift + 1, size=(num_samples, 2))
    for i, (dy, dx) in enumerate(shifts):
        images[i] = np.roll(images[i], (dy, dx), axis=(1, 2))
    images = images + rng.normal(0.0, noise, size=images.shape)
    pixels = np.clip(np.round((images / 4.0 + 0.5) * 255.0), 0, 255).astype(np.uint8)
    logger.debug("synthetic dataset: %d samples, %d classes, seed %d", num_samples, num_classes, seed)
    return Dataset(pixels, labels.astype(np.int64), num_classes)


def write_dataset(path, dataset):
    n, c, h, w = dataset.pixels.shape
    header = _HEADER.pack(Config.DATASET_MAGIC, Config.DATASET_VERSION, n, c, h, w, dataset.num_classes)
    Path(path).write_bytes(header + dataset.pixels.tobytes() + dataset.labels.astype(np.uint8).tobytes())


def load_dataset(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read dataset {path}: {e}")
    if len(data) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, n, c, h, w, classes = _HEADER.unpack_from(data, 0)
    if magic != Config.DATASET_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != Config.DATASET_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    pixel_count = n * c * h * w
    if len(data) != _HEADER.size + pixel_count + n:
        raise DatasetError(f"{path}: expected {_HEADER.size + pixel_count + n} bytes, found {len(data)}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=pixel_count, offset=_HEADER.size)
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=_HEADER.size + pixel_count)
    return Dataset(pixels.reshape(n, c, h, w).copy(), labels.astype(np.int64), classes)


def batches(dataset, batch_size, seed, epoch, drop_last=True):
    """Seed- and epoch-determined shuffled batches of (images, labels)."""
    if batch_size <= 0:
        raise ParameterError(f"batch size must be positive, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    stop = len(order) - len(order) % batch_size if drop_last else len(order)
    images = dataset.images
    for start in range(0, stop, batch_size):
        index = order[start:start + batch_size]
        yield images[index], dataset.labels[index]
