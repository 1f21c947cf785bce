"""Datasets, IDX reading, synthetic blobs and the class-group partitioner."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (EmptyDataError, IdxConsistencyError, IdxFormatError,
                     IdxLengthError, PartitionError)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

HONEST = "honest"
MALICIOUS = "malicious"

# fixed per-class vertex distance from the origin for synth_blobs
BLOB_CENTER_SCALE = 3.0


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"features {x.shape} and labels {y.shape} do not match")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite feature values")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    data: LabeledDataset
    role: str = HONEST

    def __post_init__(self):
        if len(self.data) < 1:
            raise EmptyDataError(f"client {self.client_id} has no samples")
        if self.role not in (HONEST, MALICIOUS):
            raise ValueError(f"unknown role {self.role!r}")

    @property
    def n_k(self) -> int:
        return len(self.data)

    @property
    def is_malicious(self) -> bool:
        return self.role == MALICIOUS


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    num_classes: int
    classes_per_client: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1 or self.num_classes < 1 or self.classes_per_client < 1:
            raise ValueError("partition counts must be positive")
        if self.classes_per_client > self.num_classes:
            raise ValueError("classes_per_client exceeds num_classes")


# ----------------------------------------------------------------------- IDX

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise IdxLengthError(f"{path}: file shorter than its magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise IdxLengthError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxLengthError(f"{path}: expected {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> LabeledDataset:
    """Read an IDX image/label pair (optionally gzipped) into a flat dataset.

    Pixels are scaled to [0, 1]; each image is flattened row-major.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(features, labels.astype(np.int64), num_classes)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images (n, rows, cols) and labels (n,) as raw IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# --------------------------------------------------------------------- blobs

def blob_centers(num_classes: int, input_dim: int) -> np.ndarray:
    if input_dim < num_classes:
        raise ValueError("synth_blobs needs input_dim >= num_classes for one-hot vertices")
    centers = np.zeros((num_classes, input_dim))
    centers[np.arange(num_classes), np.arange(num_classes)] = BLOB_CENTER_SCALE
    return centers


def synth_blobs(num_classes: int, samples_per_class: int, input_dim: int,
                spread: float, seed) -> LabeledDataset:
    """Isotropic Gaussian blobs around scaled one-hot vertices.

    Class ``c`` is centred at ``3 * e_c`` with per-coordinate noise std
    ``spread``. Rows are grouped by class.
    """
    if num_classes < 2 or samples_per_class < 1 or input_dim < 1:
        raise ValueError("synth_blobs counts must be positive (and >= 2 classes)")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centers = blob_centers(num_classes, input_dim)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    noise = rng.standard_normal((labels.size, input_dim))
    features = centers[labels] + spread * noise
    return LabeledDataset(features, labels, num_classes)


def train_test_blobs(num_classes=10, samples_per_class=100, input_dim=20, spread=1.0,
                     test_samples_per_class=100, seed=0):
    """Independent train and test draws from the same blob geometry."""
    seq = np.random.SeedSequence(seed)
    s_train, s_test = seq.spawn(2)
    train = synth_blobs(num_classes, samples_per_class, input_dim, spread, s_train)
    test = synth_blobs(num_classes, test_samples_per_class, input_dim, spread, s_test)
    return train, test


def split_validation(dataset: LabeledDataset, fraction: float, seed):
    """Seeded split into (validation, remainder); validation gets round(fraction*n)."""
    if not 0 < fraction < 1:
        raise ValueError("validation fraction must lie in (0, 1)")
    n = len(dataset)
    n_val = max(1, int(round(fraction * n)))
    if n_val >= n:
        raise EmptyDataError("validation split would leave no reporting data")
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(order[:n_val])), dataset.subset(np.sort(order[n_val:]))


# --------------------------------------------------------------- partitioner

def client_classes(client_id: int, num_classes: int, classes_per_client: int = 3):
    k = client_id % num_classes
    return [(k + j) % num_classes for j in range(classes_per_client)]


def partition_noniid(dataset: LabeledDataset, spec: PartitionSpec,
                     malicious_count: int = 0) -> list[ClientShard]:
    """Split ``dataset`` so client ``i`` only sees classes ``i%m .. i%m+cpc-1``.

    Each class is shuffled (seeded per class) and cut into contiguous, nearly
    equal chunks over its entitled clients in ascending id order; the first
    chunks absorb the remainder. Clients ``0 .. malicious_count-1`` are
    flagged malicious.
    """
    n_clients, m = spec.num_clients, spec.num_classes
    if not 0 <= malicious_count <= n_clients:
        raise ValueError("malicious_count must lie in [0, num_clients]")
    if dataset.num_classes != m:
        raise PartitionError(f"dataset has {dataset.num_classes} classes, partition expects {m}")

    entitled = {c: [] for c in range(m)}
    for i in range(n_clients):
        for c in client_classes(i, m, spec.classes_per_client):
            entitled[c].append(i)

    owned = [[] for _ in range(n_clients)]
    for c in range(m):
        idx = np.flatnonzero(dataset.labels == c)
        clients = entitled[c]
        if idx.size == 0:
            raise PartitionError(f"class {c} is absent from the dataset")
        if not clients:
            raise PartitionError(f"class {c} has no entitled client with N={n_clients}")
        if idx.size < len(clients):
            raise PartitionError(
                f"class {c} has {idx.size} samples for {len(clients)} entitled clients")
        rng = np.random.default_rng([spec.seed, c])
        chunks = np.array_split(rng.permutation(idx), len(clients))
        for client, chunk in zip(clients, chunks):
            owned[client].append(chunk)

    shards = []
    for i in range(n_clients):
        rows = np.sort(np.concatenate(owned[i]))
        role = MALICIOUS if i < malicious_count else HONEST
        shards.append(ClientShard(i, dataset.subset(rows), role))
    return shards
