"""Datasets, non-IID shard partitioning, semi-supervised splits and batch sampling."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .objective import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """A dataset file is malformed or inconsistent."""


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray  # one-hot, n x C

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def class_ids(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx])


@dataclass(frozen=True)
class UnlabeledDataset:
    """Inputs without labels. The true labels stay hidden from training code."""

    inputs: np.ndarray
    _hidden_labels: np.ndarray = field(repr=False)

    def __len__(self):
        return self.inputs.shape[0]

    def diagnostic_labels(self) -> np.ndarray:
        """Ground-truth class ids; for pseudo-label quality reporting only."""
        return self._hidden_labels


@dataclass(frozen=True)
class ClientData:
    labeled: LabeledDataset
    unlabeled: UnlabeledDataset
    test: LabeledDataset

    @property
    def n_train(self) -> int:
        return len(self.labeled) + len(self.unlabeled)


@dataclass(frozen=True)
class PartitionConfig:
    n_clients: int
    shards_per_client: int = 2
    epsilon: float = 0.9
    test_frac: float = 0.2

    def __post_init__(self):
        if self.n_clients < 1 or self.shards_per_client < 1:
            raise ValueError("n_clients and shards_per_client must be positive")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if not 0.0 <= self.test_frac < 1.0:
            raise ValueError(f"test_frac must lie in [0, 1), got {self.test_frac}")


def one_hot(class_ids, n_classes: int) -> np.ndarray:
    class_ids = np.asarray(class_ids, dtype=np.int64)
    out = np.zeros((class_ids.size, n_classes))
    out[np.arange(class_ids.size), class_ids] = 1.0
    return out


def gen_synthetic_blobs(n_classes: int, dim: int, n_per_class: int, spread: float, seed: int,
                        center_scale: float = 3.0) -> LabeledDataset:
    """Isotropic Gaussian clusters around seeded random centers, sorted by class."""
    if n_classes < 2 or dim < 1 or n_per_class < 1 or spread < 0:
        raise ValueError("blobs need n_classes >= 2 and positive dim, n_per_class and spread >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=center_scale, size=(n_classes, dim))
    ids = np.repeat(np.arange(n_classes), n_per_class)
    inputs = centers[ids] + spread * rng.normal(size=(ids.size, dim))
    return LabeledDataset(inputs, one_hot(ids, n_classes))


def _parse_idx(buf: bytes, magic: int, what: str) -> np.ndarray:
    if len(buf) < 4:
        raise DataFormatError(f"{what} file is truncated before the magic number")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise DataFormatError(f"{what} file has magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"{what} file is truncated inside the header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = int(np.prod(dims))
    if len(buf) - header < expected:
        raise DataFormatError(f"{what} file is truncated: {len(buf) - header} bytes of data, expected {expected}")
    return np.frombuffer(buf, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def parse_idx_pair(image_bytes: bytes, label_bytes: bytes, n_classes: int = 10) -> LabeledDataset:
    images = _parse_idx(image_bytes, IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(label_bytes, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"images file holds {images.shape[0]} items but labels file holds {labels.shape[0]}")
    if labels.size and labels.max() >= n_classes:
        raise DataFormatError(f"label {labels.max()} out of range for {n_classes} classes")
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(inputs, one_hot(labels, n_classes))


def load_idx(images_path, labels_path, n_classes: int = 10) -> LabeledDataset:
    """Read an uncompressed IDX image/label file pair; pixels are scaled to [0, 1]."""
    return parse_idx_pair(Path(images_path).read_bytes(), Path(labels_path).read_bytes(), n_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n x rows x cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


def load_mnist(data_dir=None) -> LabeledDataset:
    """MNIST training images from ``data_dir`` (plain or ``.gz``), else the bundled 5000-image sample."""
    if data_dir is not None:
        base = Path(data_dir)
        blobs = []
        for name in MNIST_FILES:
            if (base / name).exists():
                blobs.append((base / name).read_bytes())
            elif (base / f"{name}.gz").exists():
                blobs.append(gzip.decompress((base / f"{name}.gz").read_bytes()))
            else:
                raise FileNotFoundError(f"neither {name} nor {name}.gz found in {base}")
        return parse_idx_pair(*blobs)
    pkg = resources.files("fedcpsl") / "resources"
    blobs = [gzip.decompress((pkg / f"mnist5k-{name}.gz").read_bytes()) for name in MNIST_FILES]
    return parse_idx_pair(*blobs)


def mnist_subset(dataset: LabeledDataset, n_samples: int) -> LabeledDataset:
    """The first ``n_samples / C`` images of every class, kept in original order."""
    c = dataset.n_classes
    if n_samples % c:
        raise ValueError(f"n_samples={n_samples} must be a multiple of the {c} classes")
    per_class = n_samples // c
    ids = dataset.class_ids
    picks = []
    for k in range(c):
        idx = np.flatnonzero(ids == k)
        if idx.size < per_class:
            raise ValueError(f"class {k} has only {idx.size} samples, need {per_class}")
        picks.append(idx[:per_class])
    return dataset.subset(np.sort(np.concatenate(picks)))


def partition_shards(dataset: LabeledDataset, config: PartitionConfig, seed: int) -> list[LabeledDataset]:
    """Sort by label, cut into equal shards and deal them to clients at random."""
    n_clients, shards_per_client = config.n_clients, config.shards_per_client
    n_shards = n_clients * shards_per_client
    n = len(dataset)
    if n_shards > n or n % n_shards:
        raise ValueError(
            f"{n} samples cannot be cut into {n_shards} equal shards "
            f"(n_clients * shards_per_client must divide the sample count)"
        )
    order = np.argsort(dataset.class_ids, kind="stable")
    shards = order.reshape(n_shards, n // n_shards)
    perm = np.random.default_rng(seed).permutation(n_shards)
    clients = []
    for i in range(n_clients):
        mine = perm[i * shards_per_client:(i + 1) * shards_per_client]
        clients.append(dataset.subset(np.concatenate(shards[mine])))
    return clients


def split_semi(client_data: LabeledDataset, epsilon: float, test_frac: float, seed: int) -> ClientData:
    """Hold out a test split, then strip labels from a fraction ``epsilon`` of the rest."""
    if not 0.0 <= epsilon < 1.0 or not 0.0 <= test_frac < 1.0:
        raise ValueError("epsilon and test_frac must lie in [0, 1)")
    n = len(client_data)
    if n < 2:
        raise ValueError(f"a client needs at least 2 samples, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = min(int(np.floor(test_frac * n + 1e-9)), n - 1)
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    n_train = train_idx.size
    n_unlabeled = min(int(np.floor(epsilon * n_train + 1e-9)), n_train - 1)
    u_idx, l_idx = train_idx[:n_unlabeled], train_idx[n_unlabeled:]
    unlabeled = UnlabeledDataset(client_data.inputs[u_idx], client_data.class_ids[u_idx])
    return ClientData(client_data.subset(l_idx), unlabeled, client_data.subset(test_idx))


def sample_batch(labeled: LabeledDataset, unlabeled: UnlabeledDataset, s_l: int, s_u: int,
                 rng: np.random.Generator) -> Batch:
    """Uniform with-replacement draws; labeled indices are drawn before unlabeled ones."""
    if s_l > 0 and len(labeled) == 0:
        raise ValueError("cannot draw labeled samples from an empty labeled set")
    if s_u > 0 and len(unlabeled) == 0:
        raise ValueError("cannot draw unlabeled samples from an empty unlabeled set")
    l_idx = rng.integers(0, len(labeled), size=s_l) if s_l > 0 else np.zeros(0, dtype=np.int64)
    u_idx = rng.integers(0, len(unlabeled), size=s_u) if s_u > 0 else np.zeros(0, dtype=np.int64)
    return Batch(labeled.inputs[l_idx], labeled.labels[l_idx], unlabeled.inputs[u_idx], u_idx)


def full_batch(labeled: LabeledDataset, unlabeled: UnlabeledDataset, use_unlabeled: bool = True) -> Batch:
    n_u = len(unlabeled) if use_unlabeled else 0
    return Batch(labeled.inputs, labeled.labels, unlabeled.inputs[:n_u], np.arange(n_u))


def build_clients(dataset: LabeledDataset, config: PartitionConfig, seed: int) -> list[ClientData]:
    """Shard partition followed by a per-client semi-supervised split."""
    parts = partition_shards(dataset, config, seed)
    seeds = np.random.SeedSequence([seed, 1]).spawn(len(parts))
    return [
        split_semi(part, config.epsilon, config.test_frac, int(s.generate_state(1)[0]))
        for part, s in zip(parts, seeds)
    ]
