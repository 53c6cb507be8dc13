"""Per-client accuracy metrics and the agnostic-mixture lower bound.

AMP is the test-size-weighted mean of per-client accuracies, FM is their
*unweighted* population variance, and WLP is their minimum. For any mixture of
client distributions the mixture accuracy is a convex combination of the
per-client accuracies, so it can never fall below WLP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ClientShard
from .errors import ValidationError
from .models import ModelWeights, predict

SIMPLEX_TOL = 1e-9
BOUND_TOL = 1e-12


@dataclass(frozen=True)
class AccuracyProfile:
    per_client_acc: np.ndarray
    test_sizes: np.ndarray

    def __post_init__(self):
        acc = np.asarray(self.per_client_acc, dtype=np.float64)
        sizes = np.asarray(self.test_sizes, dtype=np.int64)
        if acc.ndim != 1 or acc.size == 0:
            raise ValidationError("per-client accuracies must be a non-empty vector")
        if sizes.shape != acc.shape:
            raise ValidationError("test_sizes must have one entry per client")
        if ((acc < 0) | (acc > 1)).any() or not np.isfinite(acc).all():
            raise ValidationError("accuracies must lie in [0, 1]")
        if (sizes < 1).any():
            raise ValidationError("test sizes must be positive")
        object.__setattr__(self, "per_client_acc", acc)
        object.__setattr__(self, "test_sizes", sizes)

    @classmethod
    def equal_sizes(cls, acc: Sequence[float]) -> "AccuracyProfile":
        return cls(np.asarray(acc, dtype=np.float64), np.ones(len(acc), dtype=np.int64))

    @property
    def num_clients(self) -> int:
        return len(self.per_client_acc)


def evaluate_profile(w: ModelWeights, shards: Sequence[ClientShard]) -> AccuracyProfile:
    """Accuracy of ``w`` on every client's local test set."""
    acc, sizes = [], []
    for shard in shards:
        if shard.n_test == 0:
            raise ValidationError(f"client {shard.client_id} has an empty test set")
        acc.append(float(np.mean(predict(w, shard.test_x) == shard.test_y)))
        sizes.append(shard.n_test)
    return AccuracyProfile(np.asarray(acc), np.asarray(sizes))


def amp(profile: AccuracyProfile) -> float:
    p = profile.test_sizes / profile.test_sizes.sum()
    return float(p @ profile.per_client_acc)


def fm(profile: AccuracyProfile) -> float:
    return float(np.var(profile.per_client_acc))


def wlp(profile: AccuracyProfile) -> float:
    return float(profile.per_client_acc.min())


def _check_simplex(mix: np.ndarray, k: int) -> np.ndarray:
    mix = np.asarray(mix, dtype=np.float64)
    if mix.shape != (k,):
        raise ValidationError(f"mixture needs {k} weights, got shape {mix.shape}")
    if (mix < 0).any() or abs(mix.sum() - 1.0) > SIMPLEX_TOL:
        raise ValidationError("mixture weights must be non-negative and sum to 1")
    return mix


def agnostic_mp(profile: AccuracyProfile, mix) -> float:
    """Accuracy on the mixture distribution with client weights ``mix``."""
    mix = _check_simplex(mix, profile.num_clients)
    return float(mix @ profile.per_client_acc)


@dataclass(frozen=True)
class BoundReport:
    min_mp: float
    wlp: float
    num_mixtures: int
    violations: int

    @property
    def holds(self) -> bool:
        return self.violations == 0

    def as_dict(self) -> dict:
        return {
            "min_mp": self.min_mp,
            "wlp": self.wlp,
            "num_mixtures": self.num_mixtures,
            "violations": self.violations,
            "holds": self.holds,
        }


def check_afl_bounds(profile: AccuracyProfile, num_mixtures: int, seed: int = 0) -> BoundReport:
    """Sample uniform points of the simplex and compare mixture accuracy to WLP."""
    if num_mixtures < 1:
        raise ValidationError("num_mixtures must be at least 1")
    rng = np.random.default_rng(seed)
    mixes = rng.dirichlet(np.ones(profile.num_clients), size=num_mixtures)
    floor = wlp(profile)
    mps = np.array([agnostic_mp(profile, m / m.sum()) for m in mixes])
    violations = int((mps < floor - BOUND_TOL).sum())
    return BoundReport(float(mps.min()), floor, num_mixtures, violations)


def summarize(profile: AccuracyProfile) -> dict:
    return {
        "amp": amp(profile),
        "fm": fm(profile),
        "wlp": wlp(profile),
        "per_client_acc": profile.per_client_acc.tolist(),
    }
