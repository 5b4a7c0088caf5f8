"""Datasets, Dirichlet client partitioning and two-view augmentation."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InsufficientSamples, InvalidConfig, ParseError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise InvalidConfig("dataset needs at least one row of features", "features")
        if self.labels is not None:
            if self.labels.shape != (self.features.shape[0],):
                raise InvalidConfig("one label per row required", "labels")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise InvalidConfig("labels outside [0, num_classes)", "labels")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.features[idx], labels, self.num_classes)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    samples_per_client: int
    alpha: float
    seed: int = 0

    def validate(self, dataset_size: int) -> None:
        if self.num_clients < 1:
            raise InvalidConfig("num_clients must be >= 1", "num_clients")
        if self.samples_per_client < 1:
            raise InvalidConfig("samples_per_client must be >= 1", "samples_per_client")
        if self.alpha < 0:
            raise InvalidConfig("alpha must be >= 0", "alpha")
        if self.num_clients * self.samples_per_client > dataset_size:
            raise InsufficientSamples(
                f"{self.num_clients} x {self.samples_per_client} samples requested, "
                f"dataset has {dataset_size}"
            )


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    # Class distribution this client sampled from.
    class_probs: np.ndarray

    def __len__(self):
        return self.features.shape[0]


class Partition(list):
    """List of :class:`ClientDataset` that also reports fallback draws."""

    def __init__(self, clients=(), fallbacks: int = 0):
        super().__init__(clients)
        self.fallbacks = fallbacks


def _nearest_available(cls: int, remaining: np.ndarray) -> int:
    avail = np.flatnonzero(remaining > 0)
    return int(avail[np.argmin(np.abs(avail - cls))])


def dirichlet_partition(dataset: Dataset, spec: PartitionSpec) -> Partition:
    """Split ``dataset`` into clients with Dirichlet class mixtures.

    Each client draws ``q ~ Dirichlet(alpha * prior)`` and then draws its
    samples' classes from ``q``, taking examples without replacement from a
    shared pool. ``alpha == 0`` is the one-hot limit: the client's single
    class is drawn proportionally to the prior among classes that still have
    enough examples left.

    When a drawn class is exhausted, the draw is repeated over the classes
    that still have examples (renormalized ``q``); if ``q`` puts no mass
    there, the nearest class by index is used. These fallbacks are counted
    and logged.
    """
    if dataset.labels is None:
        raise InvalidConfig("partitioning requires labels", "labels")
    spec.validate(len(dataset))
    rng = np.random.default_rng(spec.seed)
    k = dataset.num_classes
    hist = dataset.class_histogram()
    prior = hist / hist.sum()
    pools = []
    for c in range(k):
        idx = np.flatnonzero(dataset.labels == c)
        pools.append(list(rng.permutation(idx)))
    remaining = np.array([len(p) for p in pools])
    present = prior > 0

    clients, fallbacks = [], 0
    for cid in range(spec.num_clients):
        n = spec.samples_per_client
        if spec.alpha == 0:
            eligible = remaining >= n
            if not eligible.any():
                eligible = remaining > 0
                fallbacks += 1
            w = prior * eligible
            q = np.zeros(k)
            q[rng.choice(k, p=w / w.sum())] = 1.0
        else:
            q = np.zeros(k)
            q[present] = rng.dirichlet(spec.alpha * prior[present])
        chosen = []
        for _ in range(n):
            c = int(rng.choice(k, p=q))
            if remaining[c] == 0:
                fallbacks += 1
                mass = q * (remaining > 0)
                if mass.sum() > 0:
                    c = int(rng.choice(k, p=mass / mass.sum()))
                else:
                    c = _nearest_available(c, remaining)
            chosen.append(pools[c].pop())
            remaining[c] -= 1
        idx = np.array(chosen, dtype=np.int64)
        clients.append(ClientDataset(cid, dataset.features[idx], dataset.labels[idx], idx, q))
    if fallbacks:
        logger.info("dirichlet_partition: %d fallback draws", fallbacks)
    return Partition(clients, fallbacks)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


@dataclass(frozen=True)
class AugmentConfig:
    noise_std: float = 1.0
    mask_prob: float = 0.1
    flip_prob: float = 0.0
    # Length of the sign-flipped block as a fraction of the feature width.
    flip_fraction: float = 0.25

    @classmethod
    def identity(cls) -> AugmentConfig:
        return cls(0.0, 0.0, 0.0, 0.0)


def _augment(x: np.ndarray, rng: np.random.Generator, aug: AugmentConfig) -> np.ndarray:
    out = np.array(x, dtype=np.float64, copy=True)
    width = out.shape[-1]
    if aug.noise_std > 0:
        out += aug.noise_std * rng.standard_normal(out.shape)
    if aug.mask_prob > 0:
        out[rng.random(out.shape) < aug.mask_prob] = 0.0
    if aug.flip_prob > 0 and aug.flip_fraction > 0:
        rows = out.reshape(-1, width)
        length = max(1, int(round(aug.flip_fraction * width)))
        for row in rows:
            if rng.random() < aug.flip_prob:
                start = int(rng.integers(0, width - length + 1))
                row[start:start + length] *= -1.0
    return out


def make_views(sample: np.ndarray, rng: np.random.Generator,
               aug: AugmentConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented copies of ``sample`` (a vector or a batch)."""
    aug = aug or AugmentConfig()
    return _augment(sample, rng, aug), _augment(sample, rng, aug)


def synthetic_dataset(classes: int = 10, dim: int = 64, n: int = 2000, seed: int = 0,
                      separation: float = 5.0, noise: float = 1.0, nuisance_rank: int = 8,
                      nuisance_scale: float = 1.0) -> Dataset:
    """Gaussian class blobs with a shared low-rank within-class correlation.

    ``x = mu_c + U z * nuisance_scale + noise * e`` where the class means sit
    on scaled orthonormal directions (pairwise distance ``separation`` when
    ``classes <= dim``) and ``U`` spans ``nuisance_rank`` directions shared
    by every class. Labels are balanced.
    """
    if classes < 1 or dim < 1 or n < 1:
        raise InvalidConfig("classes, dim and n must be >= 1", "synthetic")
    rng = np.random.default_rng(seed)
    means = class_means(classes, dim, separation, rng)
    rank = min(nuisance_rank, dim)
    basis = np.linalg.qr(rng.standard_normal((dim, max(rank, 1))))[0][:, :rank]
    labels = rng.permutation(np.arange(n) % classes)
    features = (means[labels]
                + nuisance_scale * rng.standard_normal((n, rank)) @ basis.T
                + noise * rng.standard_normal((n, dim)))
    return Dataset(features, labels.astype(np.int64), classes)


def class_means(classes: int, dim: int, separation: float, rng) -> np.ndarray:
    if classes <= dim:
        q = np.linalg.qr(rng.standard_normal((dim, classes)))[0]
        # Tiny inflation keeps rounding from landing just under `separation`.
        return (separation / np.sqrt(2.0)) * (1.0 + 1e-9) * q.T
    means = rng.standard_normal((classes, dim))
    diffs = means[:, None, :] - means[None, :, :]
    dists = np.sqrt((diffs ** 2).sum(-1))
    closest = dists[~np.eye(classes, dtype=bool)].min()
    return means * (separation / closest) * (1.0 + 1e-9)


# Binary matrix file (little-endian):
#   magic b"DCMX" | version u8 | rows u64 | cols u64 | has_labels u8
#   | float64[rows*cols] row-major | u32[rows] labels if has_labels
MATRIX_MAGIC = b"DCMX"
MATRIX_VERSION = 1
_MATRIX_HEADER = struct.Struct("<4sBQQB")


def dataset_to_bytes(dataset: Dataset) -> bytes:
    rows, cols = dataset.features.shape
    has_labels = dataset.labels is not None
    parts = [_MATRIX_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, rows, cols, int(has_labels)),
             np.ascontiguousarray(dataset.features, dtype="<f8").tobytes()]
    if has_labels:
        parts.append(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())
    return b"".join(parts)


def dataset_from_bytes(data: bytes, num_classes: int | None = None) -> Dataset:
    if len(data) < _MATRIX_HEADER.size:
        raise ParseError("truncated header", "offset 0")
    magic, version, rows, cols, has_labels = _MATRIX_HEADER.unpack_from(data, 0)
    if magic != MATRIX_MAGIC:
        raise ParseError("bad magic", "offset 0")
    if version != MATRIX_VERSION:
        raise ParseError(f"unsupported version {version}", "offset 4")
    if has_labels not in (0, 1):
        raise ParseError("label flag must be 0 or 1", "offset 21")
    offset = _MATRIX_HEADER.size
    expected = offset + 8 * rows * cols + (4 * rows if has_labels else 0)
    if len(data) != expected:
        raise ParseError(f"file is {len(data)} bytes, expected {expected}", f"offset {len(data)}")
    features = np.frombuffer(data, "<f8", rows * cols, offset).reshape(rows, cols).astype(np.float64)
    labels = None
    if has_labels:
        labels = np.frombuffer(data, "<u4", rows, offset + 8 * rows * cols).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels is not None and rows else 1
    return Dataset(features, labels, num_classes)


def save_dataset(path, dataset: Dataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset))


def _read_csv(path: Path, num_classes: int | None) -> Dataset:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file; a header row is required", f"{path}:1") from None
        header = [h.strip() for h in header]
        label_col = header.index("label") if "label" in header else None
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(row)}", f"{path}:{lineno}")
            values = []
            for col, cell in enumerate(row):
                where = f"{path}:{lineno} column {header[col]!r}"
                if col == label_col:
                    try:
                        labels.append(int(cell))
                    except ValueError:
                        raise ParseError(f"non-integer label {cell!r}", where) from None
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(f"non-numeric cell {cell!r}", where) from None
            rows.append(values)
    if not rows:
        raise ParseError("no data rows", f"{path}:2")
    lab = np.array(labels, dtype=np.int64) if label_col is not None else None
    if num_classes is None:
        num_classes = int(lab.max()) + 1 if lab is not None else 1
    return Dataset(np.array(rows, dtype=np.float64), lab, num_classes)


def load_dataset(path=None, fmt: str = "binary", **options) -> Dataset:
    """Load a dataset from ``binary`` or ``csv`` files, or build a ``synthetic`` one.

    For ``synthetic`` the path is ignored and ``options`` go to
    :func:`synthetic_dataset`.
    """
    if fmt == "synthetic":
        return synthetic_dataset(**options)
    path = Path(path)
    if fmt == "binary":
        return dataset_from_bytes(path.read_bytes(), options.get("num_classes"))
    if fmt == "csv":
        return _read_csv(path, options.get("num_classes"))
    raise InvalidConfig(f"unknown dataset format {fmt!r}", "format")


def stratified_indices(labels: np.ndarray, fraction: float, rng) -> np.ndarray:
    """At least one example per present class, ``fraction`` of each class overall."""
    if not 0 < fraction <= 1:
        raise InvalidConfig("labeled_fraction must be in (0, 1]", "labeled_fraction")
    picked = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        take = max(1, int(round(fraction * len(idx))))
        picked.append(rng.permutation(idx)[:take])
    return np.sort(np.concatenate(picked))
