"""Small builders shared by the test modules."""

import numpy as np
import torch

from fedkf.data import ClientShard
from fedkf.models import ModelWeights


def make_shard(x, y, num_classes, k=0, test_x=None, test_y=None) -> ClientShard:
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    test_x = x[:1] if test_x is None else np.asarray(test_x, dtype=np.float32)
    test_y = y[:1] if test_y is None else np.asarray(test_y, dtype=np.int64)
    counts = np.bincount(np.concatenate([y, test_y]), minlength=num_classes)
    return ClientShard(
        client_id=k,
        train_x=x,
        train_y=y,
        test_x=test_x,
        test_y=test_y,
        train_indices=np.arange(len(y)),
        test_indices=np.arange(len(y), len(y) + len(test_y)),
        label_counts=counts,
        partition_seed=0,
        rebalanced=False,
    )


def scalar_weights(*values, arch_id="scalar") -> list[ModelWeights]:
    return [ModelWeights(arch_id, {"w": torch.tensor([float(v)], dtype=torch.float64)}) for v in values]


def vector_weights(rng, n, dim, arch_id="vector") -> list[ModelWeights]:
    return [ModelWeights(arch_id, {"w": torch.as_tensor(rng.normal(size=dim))}) for _ in range(n)]
