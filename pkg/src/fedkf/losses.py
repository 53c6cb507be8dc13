"""Generator and student losses for data-free global-local distillation.

Generator objective (minimized w.r.t. the generator, teacher frozen)::

    L_G = L_IE + lambda1 * L_CE + lambda2 * L_A

Student objective::

    L_S = L_CE(local batch) + gamma * L_KL(pseudo batch)

Softmax temperature is fixed at 1. Probabilities entering a logarithm are
clamped to at least ``EPS``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ValidationError

EPS = 1e-12


@dataclass(frozen=True)
class GenLossWeights:
    lambda1: float = 0.01
    lambda2: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class FusionWeights:
    gamma: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma >= 0):
            raise ValidationError(f"gamma must be finite and non-negative, got {self.gamma}")


def pseudo_labels(probs: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return probs.detach().argmax(dim=1)


def loss_gen_ce(probs: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of each row's own argmax class."""
    y_hat = pseudo_labels(probs)
    picked = probs.gather(1, y_hat[:, None]).squeeze(1)
    return -torch.log(picked.clamp_min(EPS)).mean()


def loss_gen_ie(probs: torch.Tensor) -> torch.Tensor:
    """Negative entropy of the batch-mean class distribution, in [-log C, 0]."""
    p_bar = probs.mean(dim=0)
    return (p_bar * torch.log(p_bar.clamp_min(EPS))).sum()


def loss_gen_act(features: torch.Tensor) -> torch.Tensor:
    """Negative mean L1 norm of the teacher's feature vectors."""
    return -features.abs().sum(dim=1).mean()


def loss_gen_total(probs, features, gw: GenLossWeights) -> torch.Tensor:
    if len(probs) != len(features):
        raise ValidationError("probability and feature batches differ in size")
    return loss_gen_ie(probs) + gw.lambda1 * loss_gen_ce(probs) + gw.lambda2 * loss_gen_act(features)


def loss_kd_kl(teacher_logits: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """Mean KL(softmax(teacher) || softmax(student)); no gradient reaches the teacher."""
    if teacher_logits.shape != student_logits.shape:
        raise ValidationError(
            f"teacher logits {tuple(teacher_logits.shape)} vs student {tuple(student_logits.shape)}"
        )
    log_t = F.log_softmax(teacher_logits.detach(), dim=1)
    log_s = F.log_softmax(student_logits, dim=1)
    return (log_t.exp() * (log_t - log_s)).sum(dim=1).mean()


def loss_student_ce(student_logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    num_classes = student_logits.shape[1]
    if len(labels) and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValidationError(f"labels must lie in [0, {num_classes})")
    return F.cross_entropy(student_logits, labels)


def loss_student_total(ce, kl, fw: FusionWeights):
    return ce + fw.gamma * kl
