"""Datasets, class distributions and partitioning across server and clients."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ParameterError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_SPLIT_CODES = {"means": 0, "train": 1, "test": 2}


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ParameterError(f"need at least 2 classes, got {self.num_classes}")
        if self.features.ndim != 2:
            raise ParameterError("features must be a 2-D matrix")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ParameterError("label vector length must equal the feature row count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ParameterError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class ClassDistribution:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim != 1:
            raise ParameterError("class distribution must be a vector")
        if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-12:
            raise ParameterError("class proportions must be nonnegative and sum to 1")
        object.__setattr__(self, "alpha", a)

    @property
    def support(self) -> frozenset:
        return frozenset(int(c) for c in np.flatnonzero(self.alpha > 0))

    def __len__(self) -> int:
        return int(self.alpha.shape[0])


@dataclass(frozen=True)
class PartitionPlan:
    server_indices: np.ndarray
    client_indices: tuple
    p_s: float = field(init=False)
    p_clients: np.ndarray = field(init=False)

    def __post_init__(self):
        sizes = [len(self.server_indices)] + [len(ix) for ix in self.client_indices]
        total = sum(sizes)
        if total == 0:
            raise ParameterError("empty partition")
        merged = np.concatenate([self.server_indices, *self.client_indices])
        if np.unique(merged).size != merged.size:
            raise ParameterError("partition index sets overlap")
        object.__setattr__(self, "p_s", sizes[0] / total)
        object.__setattr__(self, "p_clients", np.array(sizes[1:], dtype=np.float64) / total)

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    @property
    def total(self) -> int:
        return len(self.server_indices) + sum(len(ix) for ix in self.client_indices)

    def all_indices(self) -> np.ndarray:
        return np.concatenate([self.server_indices, *self.client_indices])


def synth_gaussian_mixture(num_classes: int, dim: int, n_per_class: int, separation: float,
                           seed: int, split: str = "train") -> LabeledDataset:
    """Balanced isotropic Gaussian mixture.

    Class means depend only on ``(num_classes, dim, separation, seed)``; ``split``
    selects an independent sample stream so train and test share the means.
    """
    if num_classes < 2 or dim < 1 or n_per_class < 1 or not separation > 0:
        raise ParameterError("need num_classes >= 2, dim >= 1, n_per_class >= 1, separation > 0")
    if split not in ("train", "test"):
        raise ParameterError(f"unknown split {split!r}")
    mean_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SPLIT_CODES["means"],)))
    directions = mean_rng.standard_normal((num_classes, dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    means = separation * directions / norms

    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SPLIT_CODES[split],)))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    features = means[labels] + rng.standard_normal((labels.size, dim))
    return LabeledDataset(features, labels, num_classes)


def _read_idx(path, expected_magic: int) -> tuple[tuple[int, ...], bytes]:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    payload = raw[header:]
    if len(payload) != math.prod(dims):
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header implies {math.prod(dims)}")
    return dims, payload


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Read an MNIST-style IDX image/label pair; pixels are scaled to [0, 1]."""
    img_dims, img_bytes = _read_idx(images_path, IDX_IMAGES_MAGIC)
    (n_labels,), lab_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC)
    n_images = img_dims[0]
    if n_images != n_labels:
        raise FormatError(f"{n_images} images but {n_labels} labels")
    features = np.frombuffer(img_bytes, dtype=np.uint8).reshape(n_images, -1).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_bytes, dtype=np.uint8).astype(np.int64)
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1 if labels.size else 2, 2)
    return LabeledDataset(features, labels, num_classes)


def _class_pools(labels: np.ndarray, num_classes: int, rng: np.random.Generator) -> list[np.ndarray]:
    # one shuffled index pool per class, drawn in class order
    return [rng.permutation(np.flatnonzero(labels == c)) for c in range(num_classes)]


def _take_public(pools: list[np.ndarray], public_fraction: float) -> tuple[np.ndarray, list[np.ndarray]]:
    server, rest = [], []
    for pool in pools:
        k = int(math.floor(public_fraction * pool.size + 1e-9))
        server.append(pool[:k])
        rest.append(pool[k:])
    return np.sort(np.concatenate(server)), rest


def _deal(pool: np.ndarray, m: int, offset: int) -> list[np.ndarray]:
    """Split ``pool`` into ``m`` near-equal parts; the extra samples go round-robin from ``offset``."""
    base, extra = divmod(pool.size, m)
    sizes = [base] * m
    for j in range(extra):
        sizes[(offset + j) % m] += 1
    bounds = np.cumsum([0] + sizes)
    return [pool[bounds[j]:bounds[j + 1]] for j in range(m)]


def _check_fraction(public_fraction: float):
    if not 0.0 < public_fraction < 1.0:
        raise ParameterError("public_fraction must lie in (0, 1)")


def partition_iid(dataset: LabeledDataset, num_clients: int, public_fraction: float,
                  seed: int) -> PartitionPlan:
    """Stratified public split for the server, the rest shuffled uniformly across clients."""
    if num_clients < 1:
        raise ParameterError("num_clients must be >= 1")
    _check_fraction(public_fraction)
    rng = np.random.default_rng(seed)
    pools = _class_pools(dataset.labels, dataset.num_classes, rng)
    server, rest = _take_public(pools, public_fraction)
    remainder = rng.permutation(np.concatenate(rest))
    if server.size < 1 or remainder.size < num_clients:
        raise ParameterError("too few samples for every node to receive at least one")
    parts = _deal(remainder, num_clients, 0)
    return PartitionPlan(server, tuple(np.sort(p) for p in parts))


def shard_blocks(num_classes: int, num_clients: int, classes_per_client: int) -> list[tuple[int, ...]]:
    """Designated class block for every client: contiguous blocks, contiguous client groups."""
    if classes_per_client < 1 or num_classes % classes_per_client:
        raise ParameterError(f"{num_classes} classes do not split into blocks of {classes_per_client}")
    n_blocks = num_classes // classes_per_client
    if num_clients % n_blocks:
        raise ParameterError(f"{num_clients} clients do not split evenly over {n_blocks} class blocks")
    per_block = num_clients // n_blocks
    return [tuple(range((k // per_block) * classes_per_client, (k // per_block + 1) * classes_per_client))
            for k in range(num_clients)]


def partition_shard_noniid(dataset: LabeledDataset, num_clients: int, classes_per_client: int,
                           public_fraction: float, seed: int) -> PartitionPlan:
    """Label-skewed split: each client only sees its designated block of classes.

    Clients are grouped contiguously (with 20 clients and 10 classes in pairs,
    clients 1-4 hold classes {0, 1}, clients 5-8 hold {2, 3}, ...). Within a
    block every class is dealt evenly across the block's clients.
    """
    _check_fraction(public_fraction)
    blocks = shard_blocks(dataset.num_classes, num_clients, classes_per_client)
    rng = np.random.default_rng(seed)
    pools = _class_pools(dataset.labels, dataset.num_classes, rng)
    server, rest = _take_public(pools, public_fraction)
    members: dict[tuple[int, ...], list[int]] = {}
    for k, block in enumerate(blocks):
        members.setdefault(block, []).append(k)
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for block, clients in members.items():
        for c in block:
            for k, chunk in zip(clients, _deal(rest[c], len(clients), c)):
                parts[k].append(chunk)
    client_idx = tuple(np.sort(np.concatenate(p)) for p in parts)
    if server.size < 1 or any(ix.size < 1 for ix in client_idx):
        raise ParameterError("too few samples for every node to receive at least one")
    return PartitionPlan(server, client_idx)


def class_distribution(labels: Sequence[int] | np.ndarray, num_classes: int) -> ClassDistribution:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ParameterError("class distribution of an empty set")
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    if counts.size > num_classes:
        raise ParameterError("label outside [0, num_classes)")
    return ClassDistribution(counts / labels.size)


def global_distribution(p_s: float, p_clients, server: ClassDistribution,
                        clients: Sequence[ClassDistribution]) -> ClassDistribution:
    """Dataset-size weighted mean of the server and client class distributions."""
    p_clients = np.asarray(p_clients, dtype=np.float64)
    if p_clients.shape[0] != len(clients):
        raise ParameterError("weights and client distributions are misaligned")
    if any(len(d) != len(server) for d in clients):
        raise ParameterError("class distributions differ in length")
    alpha = p_s * server.alpha
    for p, d in zip(p_clients, clients):
        alpha = alpha + p * d.alpha
    # rounding can leave the sum a few ulps away from 1
    return ClassDistribution(alpha / alpha.sum())


def plan_distributions(dataset: LabeledDataset, plan: PartitionPlan):
    """Return (server, [client...], global) class distributions for a plan."""
    C = dataset.num_classes
    server = class_distribution(dataset.labels[plan.server_indices], C)
    clients = [class_distribution(dataset.labels[ix], C) for ix in plan.client_indices]
    return server, clients, global_distribution(plan.p_s, plan.p_clients, server, clients)
