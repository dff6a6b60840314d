import gzip
import os
import struct

import numpy as np
import pytest

from twnkit.data import (
    MNIST_MEAN,
    MNIST_STD,
    Dataset,
    load_idx_pair,
    load_mnist,
    read_idx,
    subsample,
    synth_blobs,
)
from twnkit.errors import DatasetError, FormatError, TruncatedData



def write_idx_images(path, images, gz=False):
    payload = struct.pack(">IIII", 0x00000803, images.shape[0], images.shape[1], images.shape[2])
    payload += images.tobytes()
    opener = gzip.open if gz else open
    with opener(path, "wb") as f:
        f.write(payload)


def write_idx_labels(path, labels, gz=False):
    payload = struct.pack(">II", 0x00000801, labels.shape[0]) + labels.tobytes()
    opener = gzip.open if gz else open
    with opener(path, "wb") as f:
        f.write(payload)


@pytest.fixture
def tiny_idx_dir(tmp_path):
    rng = np.random.default_rng(0)
    n_train, n_test = 40, 20
    train_images = rng.integers(0, 256, (n_train, 28, 28), dtype=np.uint8)
    train_labels = (np.arange(n_train) % 10).astype(np.uint8)
    test_images = rng.integers(0, 256, (n_test, 28, 28), dtype=np.uint8)
    test_labels = (np.arange(n_test) % 10).astype(np.uint8)
    write_idx_images(tmp_path / "train-images-idx3-ubyte", train_images)
    write_idx_labels(tmp_path / "train-labels-idx1-ubyte", train_labels)
    write_idx_images(tmp_path / "t10k-images-idx3-ubyte.gz", test_images, gz=True)
    write_idx_labels(tmp_path / "t10k-labels-idx1-ubyte.gz", test_labels, gz=True)
    return tmp_path, train_images


class TestReadIdx:
    def test_label_magic_accepted(self, tmp_path):
        write_idx_labels(tmp_path / "labels", np.array([1, 2, 3], np.uint8))
        assert read_idx(tmp_path / "labels").tolist() == [1, 2, 3]

    def test_image_magic_accepted(self, tmp_path):
        imgs = np.arange(2 * 28 * 28, dtype=np.uint8).reshape(2, 28, 28) % 251
        write_idx_images(tmp_path / "images", imgs)
        assert (read_idx(tmp_path / "images") == imgs).all()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad").write_bytes(struct.pack(">I", 0xDEADBEEF) + b"\x00" * 8)
        with pytest.raises(FormatError):
            read_idx(tmp_path / "bad")

    def test_truncation_names_offset(self, tmp_path):
        imgs = np.zeros((3, 28, 28), np.uint8)
        write_idx_images(tmp_path / "trunc", imgs)
        data = (tmp_path / "trunc").read_bytes()
        (tmp_path / "trunc").write_bytes(data[:-100])
        with pytest.raises(TruncatedData, match="byte offset"):
            read_idx(tmp_path / "trunc")

    def test_gz_transparent(self, tmp_path):
        labels = np.array([7, 7], np.uint8)
        write_idx_labels(tmp_path / "l.gz", labels, gz=True)
        assert read_idx(tmp_path / "l.gz").tolist() == [7, 7]


class TestLoadMnist:
    def test_counts_and_shapes(self, tiny_idx_dir):
        directory, _ = tiny_idx_dir
        train, test = load_mnist(directory)
        assert train.images.shape == (40, 1, 28, 28)
        assert test.images.shape == (20, 1, 28, 28)
        assert train.labels.dtype == np.int64

    def test_normalization_applied_exactly_once(self, tiny_idx_dir):
        directory, raw = tiny_idx_dir
        train, _ = load_mnist(directory)
        want = (raw[0].astype(np.float32) / 255.0 - np.float32(MNIST_MEAN)) / np.float32(MNIST_STD)
        assert np.allclose(train.images[0, 0], want, atol=1e-6)
        # standardized range is bounded by the constants
        lo = (0.0 - MNIST_MEAN) / MNIST_STD
        hi = (1.0 - MNIST_MEAN) / MNIST_STD
        assert train.images.min() >= lo - 1e-5 and train.images.max() <= hi + 1e-5

    def test_checksum_mismatch_detected(self, tiny_idx_dir):
        directory, _ = tiny_idx_dir
        (directory / "sha256sums").write_text(
            "0" * 64 + "  train-images-idx3-ubyte\n"
        )
        with pytest.raises(FormatError, match="sha256"):
            load_mnist(directory)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_mnist(tmp_path)

    def test_count_mismatch(self, tmp_path):
        write_idx_images(tmp_path / "i", np.zeros((3, 28, 28), np.uint8))
        write_idx_labels(tmp_path / "l", np.zeros(4, np.uint8))
        with pytest.raises(DatasetError):
            load_idx_pair(tmp_path / "i", tmp_path / "l")

    def test_loader_deterministic(self, tiny_idx_dir):
        directory, _ = tiny_idx_dir
        a, _ = load_mnist(directory)
        b, _ = load_mnist(directory)
        assert (a.images == b.images).all()


class TestBundledPool:
    def test_ten_thousand_genuine_digits(self, bundled_pool):
        assert len(bundled_pool) == 10_000
        assert bundled_pool.images.shape == (10_000, 1, 28, 28)
        counts = np.bincount(bundled_pool.labels)
        assert counts.min() >= 863 and counts.sum() == 10_000
        # standardized stats land near the canonical MNIST normalization
        assert abs(float(bundled_pool.images.mean())) < 0.05
        assert abs(float(bundled_pool.images.std()) - 1.0) < 0.05


class TestSubsample:
    def test_per_class_counts(self, bundled_pool):
        sub = subsample(bundled_pool, 10, seed=3)
        assert len(sub) == 100
        assert (np.bincount(sub.labels) == 10).all()

    def test_deterministic(self, bundled_pool):
        a = subsample(bundled_pool, 5, seed=9)
        b = subsample(bundled_pool, 5, seed=9)
        assert (a.images == b.images).all() and (a.labels == b.labels).all()

    def test_covers_all_classes(self, bundled_pool):
        sub = subsample(bundled_pool, 1, seed=1)
        assert set(sub.labels.tolist()) == set(range(10))

    def test_rest_disjoint_and_complete(self, bundled_pool):
        sub, rest = subsample(bundled_pool, 100, seed=4, return_rest=True)
        assert len(sub) + len(rest) == len(bundled_pool)
        assert len(sub) == 1000

    def test_insufficient_samples(self, bundled_pool):
        with pytest.raises(DatasetError):
            subsample(bundled_pool, 5000, seed=1)


class TestSynthBlobs:
    def test_separable_shapes(self):
        ds = synth_blobs(3, 20, 8, 4.0, seed=1)
        assert ds.images.shape == (60, 8)
        assert np.bincount(ds.labels).tolist() == [20, 20, 20]

    def test_single_class_trivial(self):
        ds = synth_blobs(1, 10, 4, 2.0, seed=2)
        assert (ds.labels == 0).all()

    def test_deterministic(self):
        a = synth_blobs(4, 10, 8, 3.0, seed=5)
        b = synth_blobs(4, 10, 8, 3.0, seed=5)
        assert (a.images == b.images).all()

    def test_centers_separated(self):
        ds = synth_blobs(3, 50, 8, 10.0, seed=6)
        means = np.stack([ds.images[ds.labels == c].mean(axis=0) for c in range(3)])
        for c in range(3):
            assert means[c, c] > 8.0

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            synth_blobs(3, 10, 8, 0.0, seed=1)
        with pytest.raises(ValueError):
            synth_blobs(10, 10, 4, 1.0, seed=1)
