"""Dataset ingestion: synthetic generators and MNIST IDX files."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError
from .nn import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DATASET_KINDS = ("two_gaussians", "spirals", "idx_mnist")


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_shape(self) -> tuple:
        return self.inputs.shape[1:]

    def batch(self, indices=None) -> Batch:
        if indices is None:
            return Batch(self.inputs, self.labels)
        return Batch(self.inputs[indices], self.labels[indices])


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "spirals"
    n_train: int = 1000
    n_test: int = 1000
    seed: int = 0
    # two_gaussians
    dim: int = 2
    separation: float = 3.0
    # spirals
    turns: float = 1.0
    noise_std: float = 0.05
    # idx_mnist
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    downsample: int = 1
    flatten: bool = False
    limit_train: int = 0
    limit_test: int = 0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"kind must be one of {DATASET_KINDS}", key="dataset.kind")
        if self.kind != "idx_mnist" and (self.n_train < 1 or self.n_test < 1):
            raise ConfigError("n_train and n_test must be >= 1", key="dataset.n_train")
        if self.downsample < 1:
            raise ConfigError("downsample must be >= 1", key="dataset.downsample")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0", key="dataset.noise_std")


def two_gaussians(n: int, dim: int = 2, separation: float = 3.0, seed: int = 0) -> Dataset:
    """Two unit-variance Gaussian classes with means at +-separation/2 along the first axis."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    x = rng.normal(size=(n, dim))
    x[:, 0] += np.where(labels == 1, separation / 2.0, -separation / 2.0)
    return Dataset(x, labels.astype(np.int64), 2)


def spirals(n: int, turns: float = 1.0, noise_std: float = 0.05, seed: int = 0) -> Dataset:
    """Two interleaved Archimedean spirals in [-1, 1]^2; class 1 is class 0 rotated by pi."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    s = np.sqrt(rng.uniform(0.02, 1.0, n))
    theta = s * turns * 2.0 * np.pi + np.pi * labels
    x = np.stack([s * np.cos(theta), s * np.sin(theta)], axis=1)
    x += rng.normal(scale=noise_std, size=x.shape)
    return Dataset(x, labels.astype(np.int64), 2)


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX file (images 0x00000803, labels 0x00000801)."""
    with _open(path) as f:
        data = f.read()
    if len(data) < 4:
        raise IngestionError(f"{path}: file too short for IDX magic", offset=len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic != expected_magic:
        raise IngestionError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IngestionError(f"{path}: truncated IDX header", offset=len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    size = int(np.prod(dims))
    if len(data) < header + size:
        raise IngestionError(f"{path}: truncated IDX payload, expected {size} bytes", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def avg_pool(images: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return images
    n, h, w = images.shape
    h2, w2 = h // factor, w // factor
    crop = images[:, : h2 * factor, : w2 * factor]
    return crop.reshape(n, h2, factor, w2, factor).mean(axis=(2, 4))


def _mnist_split(images_path, labels_path, cfg: DatasetConfig, limit: int) -> Dataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if limit:
        images, labels = images[:limit], labels[:limit]
    x = avg_pool(images.astype(np.float64) / 255.0, cfg.downsample)
    x = x.reshape(x.shape[0], -1) if cfg.flatten else x[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), 10)


def load_dataset(cfg: DatasetConfig):
    """Return ``(train, test)`` datasets."""
    if cfg.kind == "idx_mnist":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(cfg, key):
                raise ConfigError("path required for idx_mnist", key=f"dataset.{key}")
        train = _mnist_split(cfg.train_images, cfg.train_labels, cfg, cfg.limit_train)
        test = _mnist_split(cfg.test_images, cfg.test_labels, cfg, cfg.limit_test)
        return train, test
    total = cfg.n_train + cfg.n_test
    if cfg.kind == "two_gaussians":
        full = two_gaussians(total, cfg.dim, cfg.separation, cfg.seed)
    else:
        full = spirals(total, cfg.turns, cfg.noise_std, cfg.seed)
    train = Dataset(full.inputs[: cfg.n_train], full.labels[: cfg.n_train], full.num_classes)
    test = Dataset(full.inputs[cfg.n_train :], full.labels[cfg.n_train :], full.num_classes)
    return train, test
