import json
import math

import numpy as np
import pytest

from fedkf.data import (
    DatasetSource,
    PartitionSpec,
    dirichlet_assignment,
    heterogeneity_summary,
    label_entropy,
    load_dataset,
    make_synthetic,
    partition_dirichlet,
    read_manifest,
    shards_from_manifest,
    split_train_test,
    subsample_per_class,
    write_manifest,
)
from fedkf.errors import DataUnavailableError, PartitionError, SplitError, ValidationError


def _labels_source(num_classes, per_class, seed=0):
    y = np.repeat(np.arange(num_classes), per_class)
    x = np.random.default_rng(seed).uniform(size=(len(y), 2)).astype(np.float32)
    return DatasetSource(x, y, num_classes, "labels")


def test_from_arrays_remaps_labels_densely():
    src = DatasetSource.from_arrays(np.zeros((4, 2)), np.array([7, 3, 7, 10]))
    assert src.num_classes == 3
    assert src.labels.tolist() == [1, 0, 1, 2]


@pytest.mark.parametrize("bad", [dict(num_clients=0, alpha=1.0), dict(num_clients=2, alpha=0.0), dict(num_clients=2, alpha=-1.0),
                                 dict(num_clients=2, alpha=1.0, train_fraction=1.0), dict(num_clients=2, alpha=1.0, subsample_fraction=0.0)])
def test_partition_spec_rejects_invalid(bad):
    with pytest.raises(ValidationError):
        PartitionSpec(**bad)


def test_single_client_gets_everything(blobs):
    (shard,) = partition_dirichlet(blobs, PartitionSpec(num_clients=1, alpha=0.01, seed=5))
    assert shard.n_train + shard.n_test == len(blobs)
    assert shard.label_counts.tolist() == blobs.class_counts().tolist()


def test_partition_is_deterministic(blobs):
    spec = PartitionSpec(num_clients=6, alpha=0.1, seed=9)
    a, _ = heterogeneity_summary(partition_dirichlet(blobs, spec))
    b, _ = heterogeneity_summary(partition_dirichlet(blobs, spec))
    assert np.array_equal(a, b)


def test_every_sample_assigned_once(blobs):
    shards = partition_dirichlet(blobs, PartitionSpec(num_clients=7, alpha=0.05, seed=2))
    everything = np.concatenate([np.concatenate([s.train_indices, s.test_indices]) for s in shards])
    assert np.array_equal(np.sort(everything), np.arange(len(blobs)))
    for s in shards:
        assert s.label_counts.sum() == s.n_train + s.n_test
        assert s.n_train >= 1 and s.n_test >= 1
        assert np.array_equal(np.bincount(s.train_y, minlength=4) + np.bincount(s.test_y, minlength=4), s.label_counts)


def test_too_small_dataset_is_rejected():
    with pytest.raises(PartitionError):
        partition_dirichlet(_labels_source(2, 3), PartitionSpec(num_clients=4, alpha=1.0))


def test_extreme_skew_falls_back_to_rebalancing():
    # 20 clients, 10 classes, alpha 0.01: nearly every draw leaves some client empty.
    src = _labels_source(10, 50)
    spec = PartitionSpec(num_clients=20, alpha=0.01, seed=0)
    assignment, eff_seed, rebalanced = dirichlet_assignment(src.labels, 10, spec)
    assert min(len(a) for a in assignment) >= spec.min_shard_size
    assert sum(len(a) for a in assignment) == len(src)
    assert rebalanced or eff_seed >= spec.seed


def test_redraw_records_effective_seed():
    src = _labels_source(3, 20)
    spec = PartitionSpec(num_clients=6, alpha=0.05, seed=11)
    assignment, eff_seed, rebalanced = dirichlet_assignment(src.labels, 3, spec)
    assert spec.seed <= eff_seed <= spec.seed + 100
    shards = partition_dirichlet(src, spec)
    assert all(s.partition_seed == eff_seed for s in shards)


@pytest.mark.parametrize("n,expected", [(10, 8), (5, 4), (2, 1), (3, 2), (64, 51)])
def test_split_sizes(n, expected):
    train, test = split_train_test(np.arange(n), 0.8, seed=0)
    assert len(train) == expected and len(test) == n - expected
    assert sorted(np.concatenate([train, test]).tolist()) == list(range(n))


def test_split_rejects_single_sample():
    with pytest.raises(SplitError):
        split_train_test(np.arange(1), 0.8, seed=0)


def test_split_is_deterministic():
    a = split_train_test(np.arange(50), 0.8, seed=[3, 1])
    b = split_train_test(np.arange(50), 0.8, seed=[3, 1])
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_subsample_keeps_rounded_fraction_per_class():
    src = _labels_source(5, 47)
    sub = subsample_per_class(src, 0.1, seed=0)
    # round(4.7) = 5 per class
    assert sub.class_counts().tolist() == [5] * 5


def test_label_entropy_oracle():
    counts = np.array([[5, 5, 0], [10, 0, 0], [1, 2, 1]])
    p = np.array([0.25, 0.5, 0.25])
    expected = [math.log(2), 0.0, -(p * np.log(p)).sum()]
    assert np.allclose(label_entropy(counts), expected)


def test_manifest_round_trip(tmp_path, blobs):
    spec = PartitionSpec(num_clients=4, alpha=0.3, seed=0)
    shards = partition_dirichlet(blobs, spec)
    write_manifest(tmp_path / "m.json", blobs, spec, shards)
    first = (tmp_path / "m.json").read_bytes()
    write_manifest(tmp_path / "m.json", blobs, spec, partition_dirichlet(blobs, spec))
    assert (tmp_path / "m.json").read_bytes() == first
    rebuilt = shards_from_manifest(blobs, read_manifest(tmp_path / "m.json"))
    for a, b in zip(shards, rebuilt):
        assert np.array_equal(a.train_x, b.train_x) and np.array_equal(a.test_y, b.test_y)
    assert json.loads(first)["label_counts"] == heterogeneity_summary(shards)[0].tolist()


def test_synthetic_features_in_unit_range():
    src = make_synthetic(num_classes=3, samples_per_class=10, shape=(1, 4, 4), seed=0)
    assert src.features.shape == (30, 1, 4, 4)
    assert src.features.min() >= 0 and src.features.max() <= 1


def test_missing_real_dataset_has_actionable_message(tmp_path):
    with pytest.raises(DataUnavailableError, match="data-dir"):
        load_dataset("emnist", tmp_path)


def test_emnist_idx_reader(tmp_path):
    import gzip
    import struct

    imgs = np.arange(2 * 28 * 28, dtype=np.uint8).reshape(2, 28, 28)
    labels = np.array([4, 9], dtype=np.uint8)
    with gzip.open(tmp_path / "emnist-balanced-train-images-idx3-ubyte.gz", "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, 2, 28, 28) + imgs.tobytes())
    with gzip.open(tmp_path / "emnist-balanced-train-labels-idx1-ubyte.gz", "wb") as fh:
        fh.write(struct.pack(">II", 0x801, 2) + labels.tobytes())
    src = load_dataset("emnist", tmp_path)
    assert src.features.shape == (2, 1, 28, 28)
    # stored column-major, so the loader transposes each image
    assert np.allclose(src.features[0, 0], imgs[0].T / 255.0)
    assert src.labels.tolist() == [0, 1]
