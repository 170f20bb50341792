import gzip
import struct

import numpy as np
import pytest

from zofed.data import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    DatasetConfig,
    avg_pool,
    load_dataset,
    read_idx,
    spirals,
    two_gaussians,
)
from zofed.errors import ConfigError, IngestionError


def _write_idx(path, magic, array, compress=False):
    dims = array.shape
    data = struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + array.astype(np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(data)


def test_label_file_with_ten_labels(tmp_path):
    p = tmp_path / "labels.idx"
    _write_idx(p, IDX_LABELS_MAGIC, np.arange(10))
    assert read_idx(p, IDX_LABELS_MAGIC).tolist() == list(range(10))


def test_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "labels.idx"
    _write_idx(p, IDX_LABELS_MAGIC, np.arange(10))
    with pytest.raises(IngestionError) as exc:
        read_idx(p, IDX_IMAGES_MAGIC)
    assert exc.value.offset == 0
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(IngestionError) as exc:
        read_idx(p, IDX_LABELS_MAGIC)
    assert exc.value.offset == len(raw) - 3
    p.write_bytes(raw[:2])
    with pytest.raises(IngestionError):
        read_idx(p, IDX_LABELS_MAGIC)


def _mnist_files(tmp_path, n, compress):
    rng = np.random.default_rng(0)
    paths = {}
    for split in ("train", "test"):
        img = tmp_path / f"{split}-images.idx{'.gz' if compress else ''}"
        lab = tmp_path / f"{split}-labels.idx{'.gz' if compress else ''}"
        _write_idx(img, IDX_IMAGES_MAGIC, rng.integers(0, 256, (n, 8, 8)), compress)
        _write_idx(lab, IDX_LABELS_MAGIC, rng.integers(0, 10, n), compress)
        paths[f"{split}_images"], paths[f"{split}_labels"] = str(img), str(lab)
    return paths


@pytest.mark.parametrize("compress", [False, True])
def test_idx_mnist_loading(tmp_path, compress):
    paths = _mnist_files(tmp_path, 12, compress)
    train, test = load_dataset(DatasetConfig(kind="idx_mnist", downsample=2, limit_train=5, **paths))
    assert train.inputs.shape == (5, 1, 4, 4) and len(test) == 12
    assert train.inputs.min() >= 0 and train.inputs.max() <= 1
    assert train.num_classes == 10
    flat, _ = load_dataset(DatasetConfig(kind="idx_mnist", flatten=True, **paths))
    assert flat.inputs.shape == (12, 64)


def test_idx_mnist_requires_paths():
    with pytest.raises(ConfigError):
        load_dataset(DatasetConfig(kind="idx_mnist"))


def test_avg_pool():
    img = np.arange(16.0).reshape(1, 4, 4)
    np.testing.assert_allclose(avg_pool(img, 2)[0], [[2.5, 4.5], [10.5, 12.5]])
    assert avg_pool(img, 1) is img


def test_two_gaussians_zero_separation_floor():
    data = two_gaussians(20_000, separation=0.0, seed=1)
    # with identical class distributions no rule beats chance; the best threshold on x0 is ~50%
    x0 = data.inputs[:, 0]
    accs = [max(np.mean((x0 > t) == data.labels), np.mean((x0 <= t) == data.labels)) for t in np.linspace(-2, 2, 41)]
    assert max(accs) < 0.52


def test_two_gaussians_separation_matches_bayes_rate():
    data = two_gaussians(20_000, separation=3.0, seed=2)
    acc = np.mean((data.inputs[:, 0] > 0) == data.labels)
    assert acc == pytest.approx(0.9332, abs=0.01)  # Phi(1.5)


def test_spirals_generator():
    data = spirals(1000, turns=1.0, noise_std=0.0, seed=0)
    assert data.inputs.shape == (1000, 2) and set(np.unique(data.labels)) == {0, 1}
    assert np.bincount(data.labels).tolist() == [500, 500]
    r = np.linalg.norm(data.inputs, axis=1)
    assert r.max() <= 1.0 + 1e-12 and r.min() >= np.sqrt(0.02) - 1e-12
    # class 1 is class 0 rotated by pi: the angle minus the radius phase is 0 or pi
    theta = np.arctan2(data.inputs[:, 1], data.inputs[:, 0])
    phase = np.mod(theta - r * 2 * np.pi, 2 * np.pi)
    expected = np.where(data.labels == 1, np.pi, 0.0)
    assert np.allclose(np.minimum(np.abs(phase - expected), 2 * np.pi - np.abs(phase - expected)), 0.0, atol=1e-9)


def test_synthetic_split_is_deterministic():
    cfg = DatasetConfig(kind="spirals", n_train=30, n_test=20, seed=5)
    a, b = load_dataset(cfg), load_dataset(cfg)
    assert np.array_equal(a[0].inputs, b[0].inputs) and len(a[1]) == 20


def test_dataset_config_validation():
    with pytest.raises(ConfigError):
        DatasetConfig(kind="cifar")
    with pytest.raises(ConfigError):
        DatasetConfig(n_train=0)
    with pytest.raises(ConfigError):
        DatasetConfig(noise_std=-1.0)


MNIST_DIR = __import__("os").environ.get("ZOFED_MNIST_DIR", "")


@pytest.mark.skipif(not MNIST_DIR, reason="set ZOFED_MNIST_DIR to the directory holding the MNIST IDX files")
def test_real_mnist_train_set():
    from pathlib import Path

    d = Path(MNIST_DIR)

    def pick(stem):
        for suffix in ("", ".gz"):
            if (d / (stem + suffix)).exists():
                return str(d / (stem + suffix))
        pytest.skip(f"{stem} not found")

    cfg = DatasetConfig(
        kind="idx_mnist",
        train_images=pick("train-images-idx3-ubyte"),
        train_labels=pick("train-labels-idx1-ubyte"),
        test_images=pick("t10k-images-idx3-ubyte"),
        test_labels=pick("t10k-labels-idx1-ubyte"),
    )
    train, test = load_dataset(cfg)
    assert len(train) == 60000 and len(test) == 10000
    assert set(np.unique(train.labels)) == set(range(10))
