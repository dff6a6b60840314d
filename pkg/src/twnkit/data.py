"""MNIST IDX ingestion, class-balanced subsampling, and synthetic blobs.

The loader reads the big-endian IDX containers (gzipped or raw), scales
pixels to [0, 1], and standardizes with the fixed constants mean 0.1307 /
std 0.3081 so accuracy targets are stable. It never touches the network;
scripts/fetch_mnist.py downloads the canonical files.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError, FormatError, TruncatedData
from .tensor import Rng

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

IDX_MAGIC_LABELS = 0x00000801
IDX_MAGIC_IMAGES = 0x00000803

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


@dataclass
class Dataset:
    images: np.ndarray  # float32, [n, 1, 28, 28] or [n, features]
    labels: np.ndarray  # int64, [n]
    split: str = ""
    classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels"
            )

    def __len__(self):
        return self.images.shape[0]


def _read_bytes(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path) -> np.ndarray:
    """Parse one IDX file into a uint8 array (labels: 1-d, images: 3-d)."""
    data = _read_bytes(path)
    if len(data) < 4:
        raise TruncatedData(f"{path}: header cut short at byte offset {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_MAGIC_LABELS:
        ndim = 1
    elif magic == IDX_MAGIC_IMAGES:
        ndim = 3
    else:
        raise FormatError(f"{path}: unrecognized IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedData(f"{path}: dimension header cut short at byte offset {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) < header + count:
        raise TruncatedData(
            f"{path}: payload needs {header + count} bytes, file ends at byte offset {len(data)}"
        )
    return np.frombuffer(data[header : header + count], dtype=np.uint8).reshape(dims)


def _standardize(raw: np.ndarray) -> np.ndarray:
    # raw uint8 in [0, 255]; normalization applied exactly once
    assert raw.dtype == np.uint8
    x = raw.astype(np.float32) / np.float32(255.0)
    return (x - np.float32(MNIST_MEAN)) / np.float32(MNIST_STD)


def load_idx_pair(images_path, labels_path, split: str = "") -> Dataset:
    """One images/labels IDX pair -> standardized [n, 1, 28, 28] dataset."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected an image file")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected a label file")
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    n, h, w = images.shape
    return Dataset(
        _standardize(images).reshape(n, 1, h, w),
        labels.astype(np.int64),
        split=split,
    )


def _resolve(directory, name) -> str:
    for candidate in (name, name + ".gz"):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"{name}[.gz] not found in {directory}")


def _check_manifest(directory, files):
    """Verify sha256 sums when a sha256sums manifest sits next to the files."""
    manifest = os.path.join(directory, "sha256sums")
    if not os.path.exists(manifest):
        return
    wanted = {}
    with open(manifest) as f:
        for line in f:
            parts = line.split()
            if len(parts) == 2:
                wanted[parts[1]] = parts[0]
    for path in files:
        base = os.path.basename(path)
        if base in wanted:
            digest = hashlib.sha256(open(path, "rb").read()).hexdigest()
            if digest != wanted[base]:
                raise FormatError(f"{base}: sha256 mismatch ({digest} != {wanted[base]})")


def load_mnist(directory) -> tuple[Dataset, Dataset]:
    """Canonical four-file MNIST directory -> (train, test) datasets."""
    paths = [
        _resolve(directory, TRAIN_IMAGES),
        _resolve(directory, TRAIN_LABELS),
        _resolve(directory, TEST_IMAGES),
        _resolve(directory, TEST_LABELS),
    ]
    _check_manifest(directory, paths)
    train = load_idx_pair(paths[0], paths[1], split="mnist-train")
    test = load_idx_pair(paths[2], paths[3], split="mnist-test")
    return train, test


def subsample(dataset: Dataset, per_class: int, seed: int, return_rest: bool = False):
    """Class-balanced deterministic subset (per_class samples of each label).

    With return_rest=True also returns the complement as a second Dataset.
    """
    labels = dataset.labels
    picked = []
    rest = []
    rng = Rng(seed, stream=0xB5)
    for c in range(dataset.classes):
        idx = np.flatnonzero(labels == c)
        if idx.size < per_class:
            raise DatasetError(f"class {c} has {idx.size} samples, need {per_class}")
        order = rng.permutation(idx.size)
        picked.append(np.sort(idx[order[:per_class]]))
        rest.append(np.sort(idx[order[per_class:]]))
    sel = np.concatenate(picked)
    sub = Dataset(
        dataset.images[sel], labels[sel], split=f"{dataset.split}/sub{per_class}", classes=dataset.classes
    )
    if not return_rest:
        return sub
    rem = np.concatenate(rest)
    return sub, Dataset(
        dataset.images[rem], labels[rem], split=f"{dataset.split}/rest", classes=dataset.classes
    )


def synth_blobs(classes: int, per_class: int, dims: int, separation: float, seed: int) -> Dataset:
    """Unit-variance Gaussian blobs around scaled basis-vector centers."""
    if not separation > 0:
        raise ValueError(f"separation must be > 0, got {separation}")
    if dims < classes:
        raise ValueError(f"need dims >= classes to place centers, got {dims} < {classes}")
    rng = Rng(seed, stream=0x5B)
    n = classes * per_class
    images = rng.normal(n * dims).reshape(n, dims)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    for c in range(classes):
        images[labels == c, c] += np.float32(separation)
    return Dataset(images, labels, split=f"synth-blobs-{seed}", classes=classes)
