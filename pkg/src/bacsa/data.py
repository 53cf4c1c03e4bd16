"""Datasets and client partitions with known ground-truth class proportions."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class PartitionError(ValueError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass
class ClientPartition:
    """Per-client index arrays into a parent dataset."""

    indices: list[np.ndarray]

    @property
    def n_clients(self) -> int:
        return len(self.indices)

    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.indices], dtype=np.int64)

    def client(self, ds: LabeledDataset, k: int) -> LabeledDataset:
        return ds.subset(self.indices[k])

    def is_disjoint_cover(self, n_total: int) -> bool:
        allidx = np.concatenate(self.indices) if self.indices else np.empty(0, np.int64)
        return (
            allidx.size == n_total
            and np.array_equal(np.sort(allidx), np.arange(n_total))
            and all(len(ix) > 0 for ix in self.indices)
        )


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "ccdd"  # iid | dirichlet | ccdd
    alpha: float = 0.5
    phi: int = 2

    def __post_init__(self):
        if self.scheme not in ("iid", "dirichlet", "ccdd"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.phi < 1:
            raise ValueError("phi must be at least 1")


def unit_sphere(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def gen_synthetic(
    n_classes: int, per_class: int, dim: int, spread: float, seed: int
) -> LabeledDataset:
    """Isotropic unit-variance Gaussian blobs, one per class.

    Class means sit on the unit hypersphere scaled by ``spread``. Samples are
    grouped by class in label order.
    """
    if min(n_classes, per_class, dim) < 1 or spread <= 0:
        raise ValueError("all synthetic-data parameters must be positive")
    rng = np.random.default_rng([seed, 0])
    means = spread * unit_sphere(n_classes, dim, rng)
    noise = np.random.default_rng([seed, 1]).standard_normal((n_classes * per_class, dim))
    labels = np.repeat(np.arange(n_classes), per_class)
    return LabeledDataset(means[labels] + noise, labels, n_classes)


def split_per_class(ds: LabeledDataset, n_test_per_class: int, seed: int):
    """Stratified holdout: ``n_test_per_class`` of each class go to the second set."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(ds.n_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        if n_test_per_class > idx.size:
            raise ValueError(f"class {c} has only {idx.size} samples")
        test.append(idx[:n_test_per_class])
        train.append(idx[n_test_per_class:])
    return ds.subset(np.sort(np.concatenate(train))), ds.subset(np.sort(np.concatenate(test)))


# --- IDX ---------------------------------------------------------------------


def _read_header(buf: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    if len(buf) < 4:
        raise IdxTruncatedError(f"{path}: file too short for a magic number")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise IdxTruncatedError(f"{path}: truncated header")
    return struct.unpack(f">{ndim}I", buf[4:need])


def _payload(buf: bytes, dims: tuple[int, ...], path) -> np.ndarray:
    offset = 4 + 4 * len(dims)
    n = int(np.prod(dims))
    if len(buf) - offset < n:
        raise IdxTruncatedError(f"{path}: expected {n} payload bytes, found {len(buf) - offset}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=offset).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int = 10) -> LabeledDataset:
    """Read an IDX3 image file and IDX1 label file (MNIST layout)."""
    ibuf = Path(images_path).read_bytes()
    lbuf = Path(labels_path).read_bytes()
    idims = _read_header(ibuf, IDX_IMAGES_MAGIC, 3, images_path)
    ldims = _read_header(lbuf, IDX_LABELS_MAGIC, 1, labels_path)
    if idims[0] != ldims[0]:
        raise IdxCountMismatchError(f"{idims[0]} images but {ldims[0]} labels")
    images = _payload(ibuf, idims, images_path)
    labels = _payload(lbuf, ldims, labels_path)
    feats = images.reshape(idims[0], -1).astype(float) / 255.0
    return LabeledDataset(feats, labels.astype(np.int64), n_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# --- partitions ----------------------------------------------------------------


def _class_indices(ds: LabeledDataset, rng: np.random.Generator) -> list[np.ndarray]:
    return [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.n_classes)]


def _finish(buckets: list[list[np.ndarray]]) -> ClientPartition:
    out = []
    for parts in buckets:
        ix = np.concatenate(parts) if parts else np.empty(0, np.int64)
        out.append(np.sort(ix.astype(np.int64)))
    return ClientPartition(out)


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``weights`` (ties to lower index)."""
    w = np.asarray(weights, dtype=float)
    if total == 0 or w.sum() <= 0:
        return np.zeros(w.size, dtype=np.int64)
    exact = w / w.sum() * total
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(w.size), -(exact - counts)))
        counts[order[:short]] += 1
    return counts


def partition_iid(ds: LabeledDataset, n_clients: int, seed: int) -> ClientPartition:
    """Every client gets ``count // K`` of each class; remainders go round-robin."""
    if n_clients < 1 or n_clients > len(ds):
        raise PartitionError(f"cannot split {len(ds)} samples over {n_clients} clients")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    cursor = 0
    for idx in _class_indices(ds, rng):
        base, rem = divmod(idx.size, n_clients)
        counts = np.full(n_clients, base)
        for j in range(rem):
            counts[(cursor + j) % n_clients] += 1
        cursor = (cursor + rem) % n_clients
        for k, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[k].append(part)
    part = _finish(buckets)
    if (part.sizes() == 0).any():
        raise PartitionError("IID split left a client empty")
    return part


def _repair_empty(buckets: list[np.ndarray]) -> list[np.ndarray]:
    sizes = [b.size for b in buckets]
    for k in range(len(buckets)):
        if buckets[k].size == 0:
            donor = int(np.argmax(sizes))
            if sizes[donor] < 2:
                raise PartitionError("not enough samples to give every client one")
            buckets[k] = buckets[donor][-1:]
            buckets[donor] = buckets[donor][:-1]
            sizes[k], sizes[donor] = 1, sizes[donor] - 1
    return buckets


def partition_dirichlet(
    ds: LabeledDataset, n_clients: int, alpha: float, seed: int
) -> ClientPartition:
    """Split each class across clients by a Dir(alpha) draw (label skew)."""
    if alpha <= 0:
        raise PartitionError("alpha must be positive")
    if n_clients < 1 or n_clients > len(ds):
        raise PartitionError(f"cannot split {len(ds)} samples over {n_clients} clients")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for idx in _class_indices(ds, rng):
        w = rng.dirichlet(np.full(n_clients, alpha))
        counts = largest_remainder(w, idx.size)
        for k, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[k].append(part)
    merged = _finish(buckets).indices
    return ClientPartition([np.sort(b) for b in _repair_empty(merged)])


def ccdd_classes(n_classes: int, n_clients: int, phi: int, seed: int) -> list[list[int]]:
    """Round-robin assignment of ``phi`` distinct classes per client over a seeded permutation."""
    if not 1 <= phi <= n_classes:
        raise PartitionError(f"phi={phi} must lie in [1, {n_classes}]")
    if n_clients * phi < n_classes:
        raise PartitionError(f"{n_clients} clients x {phi} classes cannot cover {n_classes} classes")
    perm = np.random.default_rng([seed, 7]).permutation(n_classes)
    return [
        sorted(int(perm[(k * phi + j) % n_classes]) for j in range(phi)) for k in range(n_clients)
    ]


def partition_ccdd(ds: LabeledDataset, n_clients: int, phi: int, seed: int) -> ClientPartition:
    """Class-constrained split: every client holds exactly ``phi`` classes."""
    assigned = ccdd_classes(ds.n_classes, n_clients, phi, seed)
    holders: list[list[int]] = [[] for _ in range(ds.n_classes)]
    for k, classes in enumerate(assigned):
        for c in classes:
            holders[c].append(k)
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c, idx in enumerate(_class_indices(ds, rng)):
        owners = holders[c]
        if idx.size < len(owners):
            raise PartitionError(f"class {c} has fewer samples than holders")
        for k, part in zip(owners, np.array_split(idx, len(owners))):
            buckets[k].append(part)
    return _finish(buckets)


def make_partition(ds: LabeledDataset, n_clients: int, spec: PartitionSpec, seed: int):
    if spec.scheme == "iid":
        return partition_iid(ds, n_clients, seed)
    if spec.scheme == "dirichlet":
        return partition_dirichlet(ds, n_clients, spec.alpha, seed)
    return partition_ccdd(ds, n_clients, spec.phi, seed)


def class_counts(partition: ClientPartition, ds: LabeledDataset) -> np.ndarray:
    """Matrix ``counts[i, k]``: samples of class ``i`` held by client ``k``."""
    out = np.zeros((ds.n_classes, partition.n_clients), dtype=np.int64)
    for k, ix in enumerate(partition.indices):
        out[:, k] = np.bincount(ds.labels[ix], minlength=ds.n_classes)
    return out


def true_proportions(partition: ClientPartition, ds: LabeledDataset) -> np.ndarray:
    counts = class_counts(partition, ds).astype(float)
    return counts / counts.sum(axis=0, keepdims=True)


def stratified_quota(counts: np.ndarray, n0: int) -> np.ndarray:
    """Per-class draw sizes summing to ``min(n0, sum(counts))``.

    Proportional to the class counts, with at least one draw per present
    class whenever ``n0`` allows it, so no held class vanishes.
    """
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    if n0 >= total:
        return counts.copy()
    present = counts > 0
    quota = np.zeros_like(counts)
    budget = n0
    if n0 >= int(present.sum()):
        quota[present] = 1
        budget -= int(present.sum())
    quota += largest_remainder(np.maximum(counts - quota, 0), budget)
    return quota


def subsample_fixed(
    indices: Sequence[np.ndarray], labels: np.ndarray, n0: int, seed: int | Sequence[int]
) -> list[np.ndarray]:
    """Class-stratified subsample of each client's indices down to ``min(N_k, n0)``."""
    if n0 < 1:
        raise ValueError("n0 must be at least 1")
    labels = np.asarray(labels)
    base = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
    out = []
    for k, ix in enumerate(indices):
        ix = np.asarray(ix, dtype=np.int64)
        if ix.size <= n0:
            out.append(ix.copy())
            continue
        rng = np.random.default_rng([*base, k])
        lab = labels[ix]
        classes = np.unique(lab)
        quota = stratified_quota(np.array([(lab == c).sum() for c in classes]), n0)
        picked = [
            rng.choice(ix[lab == c], size=int(q), replace=False) for c, q in zip(classes, quota)
        ]
        out.append(np.sort(np.concatenate(picked)))
    return out
