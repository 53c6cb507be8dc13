"""Central finite-difference checks of autograd gradients on the tiny archs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import losses
from .models import ArchSpec, forward_classifier, forward_generator, init_classifier, init_generator, softmax

TOLERANCE = 1e-4


@dataclass
class GradCheck:
    name: str
    rel_error: float

    @property
    def ok(self) -> bool:
        return self.rel_error < TOLERANCE


def finite_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _compare(name, fn, x0) -> GradCheck:
    x = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    (auto,) = torch.autograd.grad(fn(x), x)
    fd = finite_difference(lambda v: float(fn(torch.as_tensor(v))), x0)
    return GradCheck(name, relative_error(auto.numpy(), fd))


def run_suite(num_configs: int = 20, seed: int = 0) -> list[GradCheck]:
    """Check every loss and both tiny forwards on ``num_configs`` random draws."""
    rng = np.random.default_rng(seed)
    results = []
    for i in range(num_configs):
        n, c, d = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
        logits = rng.normal(size=(n, c))
        feats = rng.normal(size=(n, d))
        labels = torch.as_tensor(rng.integers(0, c, size=n))
        gw = losses.GenLossWeights(float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
        teacher = torch.as_tensor(rng.normal(size=(n, c)))
        results += [
            _compare(f"loss_gen_ce[{i}]", lambda l: losses.loss_gen_ce(softmax(l)), logits),
            _compare(f"loss_gen_ie[{i}]", lambda l: losses.loss_gen_ie(softmax(l)), logits),
            _compare(f"loss_gen_act[{i}]", losses.loss_gen_act, feats),
            _compare(
                f"loss_gen_total[{i}]",
                lambda l: losses.loss_gen_total(softmax(l), torch.as_tensor(feats), gw),
                logits,
            ),
            _compare(f"loss_kd_kl[{i}]", lambda s: losses.loss_kd_kl(teacher, s), logits),
            _compare(f"loss_student_ce[{i}]", lambda s: losses.loss_student_ce(s, labels), logits),
        ]

        in_dim, hidden = int(rng.integers(2, 6)), int(rng.integers(3, 8))
        clf = init_classifier(ArchSpec("tiny_mlp", (in_dim,), num_classes=c, hidden=hidden), int(rng.integers(1 << 30)), torch.float64)
        x = torch.as_tensor(rng.uniform(size=(n, in_dim)))
        results.append(_compare(f"forward_classifier[{i}]", lambda v: forward_classifier(clf, x, clf.split(v))[0].sum(), clf.flat().numpy()))
        results.append(_compare(f"forward_classifier_input[{i}]", lambda v: forward_classifier(clf, v)[1].sum(), x.numpy()))

        noise = int(rng.integers(2, 5))
        gen = init_generator(ArchSpec("tiny_gen", (in_dim,), noise_dim=noise, hidden=hidden), int(rng.integers(1 << 30)), torch.float64)
        z = torch.as_tensor(rng.normal(size=(n, noise)))
        w_out = torch.as_tensor(rng.normal(size=(n, in_dim)))
        results.append(_compare(f"forward_generator[{i}]", lambda v: (forward_generator(gen, z, gen.split(v)) * w_out).sum(), gen.flat().numpy()))
    return results
