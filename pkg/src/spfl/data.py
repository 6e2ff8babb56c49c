"""MNIST (IDX) and CIFAR-10 (binary) loaders, IID partitioning and test subsets."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .train import Shard

DatasetShard = Shard

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]
DATA_ROOT_ENV = "SPFL_DATA_ROOT"


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    tag: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.tag)


def _read(path: str | Path) -> bytes:
    path = Path(path)
    if not path.exists() and path.with_suffix(path.suffix + ".gz").exists():
        path = path.with_suffix(path.suffix + ".gz")
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def load_idx(path: str | Path) -> np.ndarray:
    """Decode an IDX file; images come back as (n, 1, H, W) float32 in [0, 1], labels as int64."""
    buf = _read(path)
    if len(buf) < 8:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic == IDX_IMAGES_MAGIC:
        if len(buf) < 16:
            raise FormatError(f"{path}: truncated IDX image header")
        n, rows, cols = struct.unpack(">III", buf[4:16])
        if len(buf) != 16 + n * rows * cols:
            raise FormatError(f"{path}: expected {n} images of {rows}x{cols}, file size {len(buf)}")
        pixels = np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
        return pixels.astype(np.float32) / 255.0
    if magic == IDX_LABELS_MAGIC:
        (n,) = struct.unpack(">I", buf[4:8])
        if len(buf) != 8 + n:
            raise FormatError(f"{path}: expected {n} labels, file size {len(buf)}")
        labels = np.frombuffer(buf, dtype=np.uint8, offset=8).astype(np.int64)
        if labels.size and labels.max() > 9:
            raise FormatError(f"{path}: label out of range")
        return labels
    raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")


def load_idx_pair(images_path, labels_path, tag: str = "mnist") -> Dataset:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 4 or labels.ndim != 1:
        raise FormatError("image/label files swapped")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images, labels, tag)


def load_mnist(root: str | Path) -> tuple[Dataset, Dataset]:
    root = Path(root)
    train = load_idx_pair(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
    test = load_idx_pair(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte")
    return train, test


def load_cifar_binary(path: str | Path) -> Dataset:
    """One CIFAR-10 binary batch: 3073-byte records of label + 3x32x32 pixels."""
    buf = Path(path).read_bytes()
    if len(buf) == 0:
        raise FormatError(f"{path}: empty dataset")
    if len(buf) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(buf)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, "cifar10")


def load_cifar(root: str | Path) -> tuple[Dataset, Dataset]:
    root = Path(root)
    parts = [load_cifar_binary(root / f"data_batch_{i}.bin") for i in range(1, 6)]
    train = Dataset(np.concatenate([p.inputs for p in parts]), np.concatenate([p.labels for p in parts]), "cifar10")
    return train, load_cifar_binary(root / "test_batch.bin")


def data_root(explicit: str | Path | None = None) -> Path:
    return Path(explicit or os.environ.get(DATA_ROOT_ENV, "data"))


def load_dataset(name: str, root: str | Path | None = None) -> tuple[Dataset, Dataset]:
    base = data_root(root)
    if name == "mnist":
        return load_mnist(base / "mnist" if (base / "mnist").is_dir() else base)
    if name == "cifar10":
        sub = base / "cifar-10-batches-bin"
        return load_cifar(sub if sub.is_dir() else base)
    raise ConfigError(f"unknown dataset {name!r}")


def stratified_indices(labels: np.ndarray, total: int, rng: np.random.Generator, num_classes: int = 10) -> np.ndarray:
    """``total`` indices with (near) equal counts per class."""
    per_class = np.full(num_classes, total // num_classes)
    per_class[: total % num_classes] += 1
    chosen = []
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        if len(pool) < per_class[c]:
            raise ConfigError(f"class {c} has {len(pool)} samples, need {per_class[c]}")
        chosen.append(rng.choice(pool, per_class[c], replace=False))
    return rng.permutation(np.concatenate(chosen))


def iid_partition(dataset: Dataset, num_clients: int, seed: int, cap: int | None = None) -> list[Shard]:
    """Random disjoint near-equal shards; with ``cap``, a class-balanced subset of cap per client."""
    if num_clients < 1:
        raise ConfigError("need at least one client")
    if num_clients > len(dataset):
        raise ConfigError(f"{num_clients} clients but only {len(dataset)} samples")
    rng = np.random.default_rng(seed)
    if cap is None:
        order = rng.permutation(len(dataset))
    else:
        order = stratified_indices(dataset.labels, cap * num_clients, rng, int(dataset.labels.max()) + 1)
    return [
        Shard(i, dataset.inputs[idx], dataset.labels[idx], dataset.tag)
        for i, idx in enumerate(np.array_split(order, num_clients))
    ]


def balanced_test_subset(dataset: Dataset, size: int | None, seed: int) -> Dataset:
    if size is None or size >= len(dataset):
        return dataset
    return dataset.subset(stratified_indices(dataset.labels, size, np.random.default_rng(seed)))
