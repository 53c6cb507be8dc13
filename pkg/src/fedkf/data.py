"""Dataset ingestion and Dirichlet label-skew partitioning.

Every client shard is produced in two stages: a Dirichlet draw allocates each
class's samples across the ``K`` clients, then each client's samples are split
into a local training set and a local test set.
"""

from __future__ import annotations

import gzip
import json
import math
import os
import pickle
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataUnavailableError, PartitionError, SplitError, ValidationError

DATA_DIR_ENV = "FEDKF_DATA_DIR"
MAX_REDRAWS = 100


@dataclass(frozen=True)
class DatasetSource:
    """A labelled classification dataset held in memory.

    ``features`` has shape ``(N, *sample_shape)`` with values scaled to [0, 1];
    ``labels`` are dense class indices in ``[0, num_classes)``.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValidationError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")

    @classmethod
    def from_arrays(cls, features, labels, name: str = "dataset") -> "DatasetSource":
        """Build a source, remapping arbitrary label values onto ``0..C-1``."""
        features = np.asarray(features, dtype=np.float32)
        labels = np.asarray(labels)
        classes, dense = np.unique(labels, return_inverse=True)
        return cls(features, dense.astype(np.int64), len(classes), name)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    seed: int = 0
    train_fraction: float = 0.8
    subsample_fraction: float = 1.0

    def __post_init__(self):
        if int(self.num_clients) != self.num_clients or self.num_clients < 1:
            raise ValidationError(f"num_clients must be a positive integer, got {self.num_clients}")
        if not self.alpha > 0 or not math.isfinite(self.alpha):
            raise ValidationError(f"alpha must be positive and finite, got {self.alpha}")
        if not 0 < self.train_fraction < 1:
            raise ValidationError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if not 0 < self.subsample_fraction <= 1:
            raise ValidationError(
                f"subsample_fraction must lie in (0, 1], got {self.subsample_fraction}"
            )

    @property
    def min_shard_size(self) -> int:
        # Smallest shard that still yields a non-empty train and test set.
        return max(2, math.ceil(1.0 / self.train_fraction))


@dataclass
class ClientShard:
    """One client's private data. Indices refer to rows of the source dataset."""

    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    train_indices: np.ndarray
    test_indices: np.ndarray
    label_counts: np.ndarray
    partition_seed: int = 0
    rebalanced: bool = field(default=False, repr=False)

    @property
    def n_train(self) -> int:
        return len(self.train_y)

    @property
    def n_test(self) -> int:
        return len(self.test_y)


# --------------------------------------------------------------------------
# Partitioning


def split_train_test(samples, train_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle ``samples`` by ``seed`` and cut it into (train, test).

    The training part has ``round(train_fraction * n)`` entries, clamped so that
    both parts are non-empty.
    """
    samples = np.asarray(samples)
    n = len(samples)
    if n < 2:
        raise SplitError(f"need at least 2 samples to split, got {n}")
    if not 0 < train_fraction < 1:
        raise SplitError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(math.floor(train_fraction * n + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    return samples[order[:n_train]], samples[order[n_train:]]


def _dirichlet_draw(labels: np.ndarray, num_classes: int, k: int, alpha: float, seed: int):
    rng = np.random.default_rng(seed)
    assigned: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in range(num_classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(k, alpha))
        if not np.all(np.isfinite(props)):
            props = np.zeros(k)
            props[rng.integers(k)] = 1.0
        cuts = (np.cumsum(props) * len(idx)).astype(int)[:-1]
        for client, part in enumerate(np.split(idx, cuts)):
            assigned[client].append(part)
    return [np.concatenate(parts) if parts else np.empty(0, np.int64) for parts in assigned]


def _top_up(assignment: list[np.ndarray], labels: np.ndarray, min_size: int) -> list[np.ndarray]:
    """Move single samples from the largest shard into undersized shards."""
    shards = [list(a) for a in assignment]
    while True:
        sizes = [len(s) for s in shards]
        needy = [i for i, s in enumerate(sizes) if s < min_size]
        if not needy:
            return [np.asarray(s, dtype=np.int64) for s in shards]
        donor = int(np.argmax(sizes))
        if sizes[donor] <= min_size:
            raise PartitionError("not enough samples to give every client a minimum shard")
        donor_labels = labels[shards[donor]]
        top_class = np.bincount(donor_labels).argmax()
        pos = int(np.flatnonzero(donor_labels == top_class)[-1])
        shards[needy[0]].append(shards[donor].pop(pos))


def dirichlet_assignment(
    labels: np.ndarray, num_classes: int, spec: PartitionSpec
) -> tuple[list[np.ndarray], int, bool]:
    """Assign sample indices to clients by per-class Dirichlet proportions.

    Draws are repeated with ``seed + 1, seed + 2, ...`` until every client holds at
    least ``spec.min_shard_size`` samples. If ``MAX_REDRAWS`` redraws all fail, the
    draw at the original seed is repaired by moving samples out of the largest
    shards. Returns ``(assignment, effective_seed, rebalanced)``.
    """
    k = spec.num_clients
    min_size = spec.min_shard_size
    if len(labels) < k * min_size:
        raise PartitionError(
            f"dataset of {len(labels)} samples is too small for {k} clients "
            f"(each needs at least {min_size})"
        )
    if k == 1:
        return [np.arange(len(labels))], spec.seed, False
    for attempt in range(MAX_REDRAWS + 1):
        seed = spec.seed + attempt
        assignment = _dirichlet_draw(labels, num_classes, k, spec.alpha, seed)
        if min(len(a) for a in assignment) >= min_size:
            return [np.sort(a) for a in assignment], seed, False
    assignment = _dirichlet_draw(labels, num_classes, k, spec.alpha, spec.seed)
    return [np.sort(a) for a in _top_up(assignment, labels, min_size)], spec.seed, True


def subsample_per_class(source: DatasetSource, fraction: float, seed: int) -> DatasetSource:
    """Keep ``round(fraction * n_c)`` (at least one) random samples of each class."""
    if fraction >= 1.0:
        return source
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(source.num_classes):
        idx = np.flatnonzero(source.labels == c)
        if len(idx) == 0:
            continue
        n = max(1, int(math.floor(fraction * len(idx) + 0.5)))
        keep.append(rng.choice(idx, size=n, replace=False))
    keep = np.sort(np.concatenate(keep))
    return DatasetSource(
        source.features[keep], source.labels[keep], source.num_classes, source.name
    )


def _build_shards(source, assignment, spec, effective_seed, rebalanced):
    shards = []
    for k, idx in enumerate(assignment):
        train_idx, test_idx = split_train_test(
            idx, spec.train_fraction, [effective_seed, k]
        )
        shards.append(
            ClientShard(
                client_id=k,
                train_x=source.features[train_idx],
                train_y=source.labels[train_idx],
                test_x=source.features[test_idx],
                test_y=source.labels[test_idx],
                train_indices=train_idx,
                test_indices=test_idx,
                label_counts=np.bincount(source.labels[idx], minlength=source.num_classes),
                partition_seed=effective_seed,
                rebalanced=rebalanced,
            )
        )
    return shards


def partition_dirichlet(source: DatasetSource, spec: PartitionSpec) -> list[ClientShard]:
    """Split ``source`` into ``spec.num_clients`` label-skewed client shards.

    ``spec.subsample_fraction`` is applied per class first; the returned shards
    index into that subsampled dataset (see :func:`subsample_per_class`).
    Each shard is then divided into train/test with ``spec.train_fraction``.
    """
    if len(source) == 0:
        raise PartitionError("cannot partition an empty dataset")
    source = subsample_per_class(source, spec.subsample_fraction, spec.seed)
    assignment, eff_seed, rebalanced = dirichlet_assignment(
        source.labels, source.num_classes, spec
    )
    return _build_shards(source, assignment, spec, eff_seed, rebalanced)


def label_entropy(counts: np.ndarray) -> np.ndarray:
    """Entropy (nats) of each row of a count matrix, with 0 log 0 = 0."""
    counts = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    totals = counts.sum(axis=1, keepdims=True)
    p = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    logs = np.log(p, out=np.zeros_like(p), where=p > 0)
    return -(p * logs).sum(axis=1)


def heterogeneity_summary(shards: Sequence[ClientShard]) -> tuple[np.ndarray, np.ndarray]:
    """Return the K x C label-count matrix and the per-client label entropy."""
    counts = np.stack([s.label_counts for s in shards]).astype(np.int64)
    return counts, label_entropy(counts)


# --------------------------------------------------------------------------
# Manifests


def write_manifest(path, source: DatasetSource, spec: PartitionSpec, shards) -> dict:
    counts, entropy = heterogeneity_summary(shards)
    manifest = {
        "dataset": source.name,
        "num_samples": len(source),
        "num_classes": source.num_classes,
        "spec": {
            "num_clients": spec.num_clients,
            "alpha": spec.alpha,
            "seed": spec.seed,
            "train_fraction": spec.train_fraction,
            "subsample_fraction": spec.subsample_fraction,
        },
        "effective_seed": shards[0].partition_seed,
        "rebalanced": bool(shards[0].rebalanced),
        "label_counts": counts.tolist(),
        "entropy": [round(float(e), 12) for e in entropy],
        "shards": [
            {
                "client_id": s.client_id,
                "train": s.train_indices.tolist(),
                "test": s.test_indices.tolist(),
            }
            for s in shards
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def shards_from_manifest(source: DatasetSource, manifest: dict) -> list[ClientShard]:
    """Rebuild shards from a manifest without re-sampling.

    ``source`` must already be subsampled exactly as when the manifest was written.
    """
    if manifest["num_samples"] != len(source):
        raise ValidationError(
            f"manifest expects {manifest['num_samples']} samples, source has {len(source)}"
        )
    shards = []
    for entry in manifest["shards"]:
        tr = np.asarray(entry["train"], dtype=np.int64)
        te = np.asarray(entry["test"], dtype=np.int64)
        labels = source.labels[np.concatenate([tr, te])]
        shards.append(
            ClientShard(
                client_id=entry["client_id"],
                train_x=source.features[tr],
                train_y=source.labels[tr],
                test_x=source.features[te],
                test_y=source.labels[te],
                train_indices=tr,
                test_indices=te,
                label_counts=np.bincount(labels, minlength=source.num_classes),
                partition_seed=manifest["effective_seed"],
                rebalanced=manifest.get("rebalanced", False),
            )
        )
    return shards


# --------------------------------------------------------------------------
# Sources


def make_synthetic(
    num_classes: int = 10,
    samples_per_class: int = 100,
    shape: int | Sequence[int] = 16,
    separation: float = 3.0,
    seed: int = 0,
    name: str = "synthetic",
) -> DatasetSource:
    """Gaussian-blob classification data, min-max scaled into [0, 1]."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    dim = int(np.prod(shape))
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=separation / math.sqrt(2), size=(num_classes, dim))
    x = np.concatenate(
        [centers[c] + rng.normal(size=(samples_per_class, dim)) for c in range(num_classes)]
    )
    y = np.repeat(np.arange(num_classes), samples_per_class)
    x = (x - x.min()) / (x.max() - x.min())
    order = rng.permutation(len(y))
    return DatasetSource(
        x[order].reshape((-1,) + shape).astype(np.float32),
        y[order].astype(np.int64),
        num_classes,
        name,
    )


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir is None:
        data_dir = os.environ.get(DATA_DIR_ENV, "data")
    return Path(data_dir).expanduser()


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise ValidationError(f"{path} is not an unsigned-byte IDX file")
    dims = struct.unpack(">" + "I" * ndim, raw[4 : 4 + 4 * ndim])
    return np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _find(data_dir: Path, names: Sequence[str]) -> Path:
    for sub in ("", "emnist", "gzip", "emnist/gzip"):
        for name in names:
            p = data_dir / sub / name
            if p.exists():
                return p
    raise DataUnavailableError(
        f"none of {list(names)} found under {data_dir}; download the archive manually "
        f"and point --data-dir or ${DATA_DIR_ENV} at it"
    )


def load_emnist(data_dir=None, split: str = "balanced") -> DatasetSource:
    """Load the EMNIST training split from the official gzip IDX files."""
    data_dir = resolve_data_dir(data_dir)
    stem = f"emnist-{split}-train"
    images = _read_idx(_find(data_dir, [f"{stem}-images-idx3-ubyte.gz", f"{stem}-images-idx3-ubyte"]))
    labels = _read_idx(_find(data_dir, [f"{stem}-labels-idx1-ubyte.gz", f"{stem}-labels-idx1-ubyte"]))
    # EMNIST images are stored transposed relative to MNIST.
    x = images.transpose(0, 2, 1)[:, None].astype(np.float32) / 255.0
    return DatasetSource.from_arrays(x, labels, name=f"emnist-{split}")


def load_cifar(data_dir=None, num_classes: int = 10) -> DatasetSource:
    """Load the CIFAR-10/100 training split from the python pickle archives."""
    data_dir = resolve_data_dir(data_dir)
    if num_classes == 10:
        folder, files, key = "cifar-10-batches-py", [f"data_batch_{i}" for i in range(1, 6)], b"labels"
    elif num_classes == 100:
        folder, files, key = "cifar-100-python", ["train"], b"fine_labels"
    else:
        raise ValidationError("CIFAR comes with 10 or 100 classes")
    xs, ys = [], []
    for f in files:
        path = data_dir / folder / f
        if not path.exists():
            raise DataUnavailableError(
                f"{path} not found; extract the CIFAR archive under {data_dir}"
            )
        with open(path, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        xs.append(np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(batch[key]))
    x = np.concatenate(xs).astype(np.float32) / 255.0
    return DatasetSource.from_arrays(x, np.concatenate(ys), name=f"cifar{num_classes}")


def load_dataset(name: str, data_dir=None, **kwargs) -> DatasetSource:
    """Dispatch on dataset name: ``synthetic``, ``emnist``, ``cifar10``, ``cifar100``."""
    if name == "synthetic":
        return make_synthetic(**kwargs)
    if name == "emnist":
        return load_emnist(data_dir, **kwargs)
    if name in ("cifar10", "cifar100"):
        return load_cifar(data_dir, int(name[5:]))
    raise ValidationError(f"unknown dataset {name!r}")
