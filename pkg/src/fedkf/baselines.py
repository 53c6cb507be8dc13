"""Comparison algorithms: FedAvg, FedProx, FedGKD and q-FFL.

These follow the forms of their original publications:

* FedProx adds ``(mu / 2) * ||w - w_global||^2`` to the local loss.
* FedGKD keeps the last ``buffer_size`` global models, averages them into one
  teacher and adds ``gamma * KL(teacher || student)`` on *local* batches.
* q-FFL (q-FedAvg) reweights client updates by ``F_k ** q``, where ``F_k`` is the
  client's training loss on the broadcast model.

The cache-slot aggregation is orthogonal to all of them and is switched on by the
server (``use_t1``); client logic does not change.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .client import ClientHyperparams, ClientUpdateResult, client_streams, epoch_batches
from .data import ClientShard
from .errors import NonFiniteLossError, ValidationError
from .losses import loss_kd_kl, loss_student_ce
from .models import ModelWeights, forward_classifier, module_from_weights, weighted_average, weights_from_module

ALGORITHMS = ("fedavg", "fedprox", "fedgkd", "qffl", "fedkf")

# Defaults are the best values reported for EMNIST.
DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "fedavg": {},
    "fedprox": {"mu": 0.001},
    "fedgkd": {"gamma": 0.001, "buffer_size": 5},
    "qffl": {"q": 0.0001},
    "fedkf": {"lambda1": 0.01, "lambda2": 0.1, "gamma": 1.0, "train_generator": True},
}


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str = "fedkf"
    use_t1: bool = True
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in ALGORITHMS:
            raise ValidationError(f"unknown algorithm {self.name!r}; choose from {ALGORITHMS}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.name])
        if unknown:
            raise ValidationError(f"unknown parameters for {self.name}: {sorted(unknown)}")
        merged = {**DEFAULT_PARAMS[self.name], **self.params}
        object.__setattr__(self, "params", merged)
        if merged.get("mu", 0) < 0 or merged.get("q", 0) < 0 or merged.get("gamma", 0) < 0:
            raise ValidationError("mu, q and gamma must be non-negative")
        if "buffer_size" in merged and (int(merged["buffer_size"]) != merged["buffer_size"] or merged["buffer_size"] < 1):
            raise ValidationError("buffer_size must be a positive integer")
        if self.name == "qffl" and self.use_t1:
            raise ValidationError("q-FFL has no cache-slot variant; set use_t1 to false")

    @property
    def label(self) -> str:
        return self.name + ("+t1" if self.use_t1 and self.name != "fedkf" else "")


# --------------------------------------------------------------------------
# Local training shared by FedAvg, FedProx and FedGKD


def _param_dict(w) -> dict[str, torch.Tensor]:
    if isinstance(w, ModelWeights):
        return dict(w.entries)
    if isinstance(w, torch.nn.Module):
        return dict(w.named_parameters())
    return dict(w)


def fedprox_penalty(w_local, w_global, mu: float) -> torch.Tensor:
    """``(mu / 2) * sum ||w_local - w_global||^2`` over all parameter entries."""
    local, anchor = _param_dict(w_local), _param_dict(w_global)
    if set(local) != set(anchor) or any(local[k].shape != anchor[k].shape for k in local):
        raise ValidationError("FedProx penalty needs weights of the same architecture")
    total = sum(((local[k] - anchor[k].detach()) ** 2).sum() for k in local)
    return 0.5 * mu * total


def local_train(
    w_start: ModelWeights,
    shard: ClientShard,
    hp: ClientHyperparams,
    seed: int,
    prox_mu: float = 0.0,
    distill_teacher: ModelWeights | None = None,
    distill_gamma: float = 0.0,
) -> ClientUpdateResult:
    """Mini-batch SGD on local cross-entropy with optional proximal / distillation terms."""
    order_rng, _, _ = client_streams(seed)
    model = module_from_weights(w_start)
    opt = torch.optim.SGD(model.parameters(), lr=hp.lr)
    teacher = None
    if distill_teacher is not None and distill_gamma > 0:
        teacher = module_from_weights(distill_teacher, trainable=False).eval()
    x = torch.as_tensor(shard.train_x, dtype=w_start.dtype)
    y = torch.as_tensor(shard.train_y, dtype=torch.long)
    trace = []
    for epoch in range(hp.epochs):
        for idx in epoch_batches(len(y), hp.batch_size, order_rng):
            opt.zero_grad(set_to_none=True)
            logits, _ = model(x[idx])
            loss = loss_student_ce(logits, y[idx])
            if prox_mu > 0:
                loss = loss + fedprox_penalty(model, w_start, prox_mu)
            if teacher is not None:
                with torch.no_grad():
                    t_logits, _ = teacher(x[idx])
                loss = loss + distill_gamma * loss_kd_kl(t_logits, logits)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"local loss became {float(loss)} at epoch {epoch}")
            loss.backward()
            opt.step()
            trace.append((float("nan"), float(loss.detach())))
    return ClientUpdateResult(weights_from_module(model, w_start.arch_id), trace)


def fedavg_client_update(k: int, w_global: ModelWeights, shard: ClientShard, hp: ClientHyperparams, seed: int) -> ModelWeights:
    return local_train(w_global, shard, hp, seed).weights


def fedprox_client_update(k, w_global, shard, hp, seed, mu: float) -> ClientUpdateResult:
    return local_train(w_global, shard, hp, seed, prox_mu=mu)


# --------------------------------------------------------------------------
# FedGKD


class GlobalModelBuffer:
    """The most recent ``size`` global models, oldest first."""

    def __init__(self, size: int = 5):
        if size < 1:
            raise ValidationError("buffer size must be at least 1")
        self.size = int(size)
        self._models: deque[ModelWeights] = deque(maxlen=self.size)

    def push(self, w: ModelWeights) -> None:
        self._models.append(w)

    def __len__(self) -> int:
        return len(self._models)

    def models(self) -> list[ModelWeights]:
        return list(self._models)


def fedgkd_teacher(buffer: GlobalModelBuffer, current: ModelWeights | None = None) -> ModelWeights:
    """Uniform element-wise mean of the buffered global models."""
    models = buffer.models()
    if not models:
        if current is None:
            raise ValidationError("empty FedGKD buffer and no current global model")
        return current
    return weighted_average(models, np.ones(len(models)))


def fedgkd_client_update(k, w_global, teacher: ModelWeights, shard, hp, seed, gamma: float) -> ClientUpdateResult:
    return local_train(w_global, shard, hp, seed, distill_teacher=teacher, distill_gamma=gamma)


# --------------------------------------------------------------------------
# q-FFL


@torch.no_grad()
def local_loss(w: ModelWeights, shard: ClientShard, batch_size: int = 1024) -> float:
    """Mean training cross-entropy of ``w`` on a client's local training set."""
    x = torch.as_tensor(shard.train_x, dtype=w.dtype)
    y = torch.as_tensor(shard.train_y, dtype=torch.long)
    total = 0.0
    for i in range(0, len(y), batch_size):
        logits, _ = forward_classifier(w, x[i : i + batch_size])
        total += float(torch.nn.functional.cross_entropy(logits, y[i : i + batch_size], reduction="sum"))
    return total / len(y)


def qffl_aggregate(
    w_global: ModelWeights,
    client_updates: Sequence[ModelWeights],
    losses: Sequence[float],
    q: float,
    lr: float,
    sizes: Sequence[float] | None = None,
) -> ModelWeights:
    """q-FedAvg server update.

    With ``delta_k = (w_global - w_k) / lr`` and
    ``h_k = q F_k^(q-1) ||delta_k||^2 + F_k^q / lr`` the new model is
    ``w_global - sum_k s_k F_k^q delta_k / sum_k s_k h_k``. The client weights
    ``s_k`` are the sizes when given (so ``q = 0`` gives the size-weighted
    FedAvg average) and 1 otherwise.
    """
    if not client_updates:
        raise ValidationError("q-FFL needs at least one client update")
    if q < 0 or lr <= 0:
        raise ValidationError("q must be >= 0 and lr > 0")
    s = np.ones(len(client_updates)) if sizes is None else np.asarray(sizes, dtype=np.float64)
    f = np.maximum(np.asarray(losses, dtype=np.float64), 1e-10)
    g = w_global.flat().to(torch.float64)
    deltas = [(g - w.flat().to(torch.float64)) / lr for w in client_updates]
    fq = f**q
    h = np.array([q * f[i] ** (q - 1) * float(d @ d) + fq[i] / lr for i, d in enumerate(deltas)])
    step = sum(float(s[i] * fq[i]) * d for i, d in enumerate(deltas)) / float(s @ h)
    return w_global.unflatten((g - step).to(w_global.dtype))
