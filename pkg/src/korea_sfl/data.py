"""Datasets, IDX I/O, Dirichlet partitioning and seeded batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from korea_sfl import rng as rngs
from korea_sfl.engine import ContractError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ContractError(f"dataset x must be a non-empty [M, d] array, got {list(self.x.shape)}")
        if self.y.shape != (self.x.shape[0],):
            raise ContractError("dataset y must have one label per row of x")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    dirichlet_beta: float | None = None  # None means IID
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 2:
            raise ContractError("a partition needs at least two clients")
        if self.dirichlet_beta is not None and not self.dirichlet_beta > 0:
            raise ContractError("dirichlet_beta must be positive")

    @property
    def iid(self) -> bool:
        return self.dirichlet_beta is None


@dataclass(frozen=True)
class Partition:
    indices: list[np.ndarray]
    histograms: list[np.ndarray]


def class_counts(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return np.bincount(labels, minlength=num_classes)[:num_classes]


def make_blobs(num_classes: int, dim: int, samples_per_class: int, spread: float, seed: int,
               separation: float = 4.0) -> Dataset:
    """Gaussian class clusters around random unit-norm centres scaled by ``separation``.

    Rows are shuffled so that contiguous slices are not class-sorted.
    """
    if min(num_classes, dim, samples_per_class) < 1 or spread < 0 or separation <= 0:
        raise ContractError("make_blobs parameters must be positive")
    gen = rngs.stream(seed, "blobs")
    centers = gen.standard_normal((num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= separation
    y = np.repeat(np.arange(num_classes), samples_per_class)
    x = centers[y] + spread * gen.standard_normal((y.size, dim))
    order = gen.permutation(y.size)
    return Dataset(x[order], y[order], num_classes)


def holdout_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/test split; each class keeps ``round(n_c * test_fraction)`` test rows."""
    if not 0 < test_fraction < 1:
        raise ContractError("test_fraction must lie in (0, 1)")
    gen = rngs.stream(seed, "holdout")
    test_idx = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.y == c)
        take = int(np.floor(members.size * test_fraction + 0.5))
        test_idx.append(gen.permutation(members)[:take])
    test = np.sort(np.concatenate(test_idx))
    mask = np.ones(len(dataset), dtype=bool)
    mask[test] = False
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(test)


# IDX format: big-endian u32 magic, u32 dims..., then u8 payload.

def _read_header(raw: bytes, path, magic: int, ndims: int) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(raw) >= 4:
        (found,) = struct.unpack(">I", raw[:4])
        if found != magic:
            raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: header needs {need} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndims}I", raw[4:need])
    body = int(np.prod(dims))
    if len(raw) < need + body:
        raise TruncatedFileError(f"{path}: payload needs {body} bytes, file has {len(raw) - need}")
    return dims


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Parse an IDX image/label pair; pixels scale to [0, 1] and images flatten to rows."""
    img_raw = Path(images_path).read_bytes()
    lab_raw = Path(labels_path).read_bytes()
    m, rows, cols = _read_header(img_raw, images_path, IMAGES_MAGIC, 3)
    (ml,) = _read_header(lab_raw, labels_path, LABELS_MAGIC, 1)
    if m != ml:
        raise CountMismatchError(f"{images_path} holds {m} images but {labels_path} holds {ml} labels")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, count=m * rows * cols, offset=16)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, count=m, offset=8)
    x = pixels.reshape(m, rows * cols).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels) -> None:
    """Write u8 images ``[M, rows, cols]`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    m, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, m, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, labels.size) + labels.tobytes())


def _iid_allocation(y: np.ndarray, num_classes: int, n: int, gen) -> list[list[int]]:
    buckets: list[list[int]] = [[] for _ in range(n)]
    offset = 0
    for c in range(num_classes):
        members = gen.permutation(np.flatnonzero(y == c))
        for j, idx in enumerate(members):
            buckets[(offset + j) % n].append(int(idx))
        offset += members.size
    return buckets


def _dirichlet_allocation(y: np.ndarray, num_classes: int, n: int, beta: float, gen) -> list[list[int]]:
    buckets: list[list[int]] = [[] for _ in range(n)]
    for c in range(num_classes):
        members = gen.permutation(np.flatnonzero(y == c))
        props = gen.dirichlet(np.full(n, beta))
        cuts = (np.cumsum(props) * members.size).astype(int)[:-1]
        for bucket, chunk in zip(buckets, np.split(members, cuts)):
            bucket.extend(int(i) for i in chunk)
    return buckets


def partition(dataset: Dataset, spec: PartitionSpec, max_retries: int = 10) -> Partition:
    """Split ``dataset`` across clients, IID (stratified round-robin) or class-wise Dirichlet.

    A Dirichlet draw that leaves a client empty is redrawn up to ``max_retries``
    times; after that each empty client takes one sample from the largest one.
    """
    n = spec.num_clients
    if n > len(dataset):
        raise ContractError(f"cannot give {n} clients at least one of {len(dataset)} samples")
    gen = rngs.stream(spec.seed, "partition")
    if spec.iid:
        buckets = _iid_allocation(dataset.y, dataset.num_classes, n, gen)
    else:
        for _ in range(max_retries + 1):
            buckets = _dirichlet_allocation(dataset.y, dataset.num_classes, n, spec.dirichlet_beta, gen)
            if all(buckets):
                break
        for k in range(n):
            if not buckets[k]:
                donor = max(range(n), key=lambda j: (len(buckets[j]), -j))
                buckets[k].append(buckets[donor].pop())
    indices = [np.array(sorted(b), dtype=np.int64) for b in buckets]
    hists = [class_counts(dataset.y[idx], dataset.num_classes) for idx in indices]
    return Partition(indices, hists)


def batches(client_indices: np.ndarray, batch_size: int, seed: int, client_id: int, round_: int
            ) -> list[np.ndarray]:
    """One shuffled pass over a client's indices, reshuffled per ``(seed, client, round)``.

    The last short batch is kept.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be at least 1")
    order = rngs.stream(seed, "batch", client_id, round_).permutation(len(client_indices))
    shuffled = np.asarray(client_indices)[order]
    return [shuffled[i : i + batch_size] for i in range(0, shuffled.size, batch_size)]
