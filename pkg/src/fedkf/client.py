"""Client-side update with global-local knowledge fusion.

For every local batch the client first takes one step on a freshly initialized
generator so that its pseudo-samples look like data the teacher (the
overall-clients model) is confident and diverse on, then takes one step on the
student (the active-clients model) with local cross-entropy plus ``gamma`` times
the teacher-to-student KL divergence on those pseudo-samples.

Only the student weights leave :func:`client_update`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.func import functional_call

from .data import ClientShard
from .errors import NonFiniteLossError, ProtocolError, ValidationError
from .losses import (
    FusionWeights,
    GenLossWeights,
    loss_gen_total,
    loss_kd_kl,
    loss_student_ce,
    loss_student_total,
)
from .models import (
    ArchSpec,
    ModelWeights,
    _template,
    forward_classifier,
    init_generator,
    module_from_weights,
    softmax,
    weights_from_module,
)


@dataclass(frozen=True)
class ClientHyperparams:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    gen_lr: float = 0.001
    gen_weights: GenLossWeights = field(default_factory=GenLossWeights)
    fusion: FusionWeights = field(default_factory=FusionWeights)
    generator: ArchSpec | None = None
    gen_optimizer: str = "adam"
    train_generator: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if not (self.lr > 0 and self.gen_lr > 0):
            raise ValidationError("learning rates must be positive")
        if self.gen_optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown generator optimizer {self.gen_optimizer!r}")

    @property
    def uses_generator(self) -> bool:
        return self.train_generator or self.fusion.gamma > 0


@dataclass
class ClientUpdateResult:
    weights: ModelWeights
    trace: list[tuple[float, float]]

    @property
    def mean_loss_s(self) -> float:
        return float(np.mean([s for _, s in self.trace])) if self.trace else float("nan")

    @property
    def mean_loss_g(self) -> float:
        vals = [g for g, _ in self.trace if not math.isnan(g)]
        return float(np.mean(vals)) if vals else float("nan")


def client_streams(seed: int) -> tuple[np.random.Generator, torch.Generator, int]:
    """Independent (batch order, noise, generator init) streams for one call."""
    ss = np.random.SeedSequence(seed)
    order_ss, noise_ss, init_ss = ss.spawn(3)
    noise = torch.Generator().manual_seed(int(noise_ss.generate_state(1, np.uint64)[0] >> 1))
    return np.random.default_rng(order_ss), noise, int(init_ss.generate_state(1)[0])


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle ``range(n)`` and cut it into batches; the short final batch is kept."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def generator_objective(teacher_logits, teacher_features, gw: GenLossWeights):
    return loss_gen_total(softmax(teacher_logits), teacher_features, gw)


def _check_finite(value: torch.Tensor, what: str, where: str):
    if not torch.isfinite(value):
        raise NonFiniteLossError(f"{what} became {float(value)} at {where}")


def _generator_update(gen, teacher, z, opt, gw) -> float:
    opt.zero_grad(set_to_none=True)
    logits, feats = teacher(gen(z))
    loss = generator_objective(logits, feats, gw)
    loss.backward()
    opt.step()
    return loss.detach()


def _student_update(student, teacher, gen, z, xb, yb, opt, fusion) -> torch.Tensor:
    opt.zero_grad(set_to_none=True)
    if fusion.gamma > 0:
        with torch.no_grad():
            x_g = gen(z)
            t_logits, _ = teacher(x_g)
        logits, _ = student(torch.cat([xb, x_g]))
        ce = loss_student_ce(logits[: len(xb)], yb)
        loss = loss_student_total(ce, loss_kd_kl(t_logits, logits[len(xb) :]), fusion)
    else:
        logits, _ = student(xb)
        loss = loss_student_ce(logits, yb)
    loss.backward()
    opt.step()
    return loss.detach()


def client_update(
    k: int,
    w_teacher: ModelWeights,
    w_student: ModelWeights,
    shard: ClientShard,
    hp: ClientHyperparams,
    seed: int,
    debug_dir=None,
) -> ClientUpdateResult:
    """Run ``hp.epochs`` epochs of generator + student steps on one client.

    ``w_teacher`` is only read. With ``gamma == 0`` and ``train_generator`` off
    this is exactly mini-batch SGD on the local cross-entropy.
    """
    if w_teacher.arch_id != w_student.arch_id:
        raise ProtocolError(f"teacher {w_teacher.arch_id} and student {w_student.arch_id} differ")
    if shard.n_train == 0:
        raise ValidationError(f"client {k} has no training data")
    order_rng, noise_rng, gen_seed = client_streams(seed)

    student = module_from_weights(w_student)
    teacher = module_from_weights(w_teacher, trainable=False).eval()
    opt_s = torch.optim.SGD(student.parameters(), lr=hp.lr)
    gen = opt_g = None
    if hp.uses_generator:
        if hp.generator is None:
            raise ValidationError("a generator architecture is required when gamma > 0 or generator training is on")
        gen = module_from_weights(init_generator(hp.generator, gen_seed, w_student.dtype))
        if hp.gen_optimizer == "adam":
            opt_g = torch.optim.Adam(gen.parameters(), lr=hp.gen_lr)
        else:
            opt_g = torch.optim.SGD(gen.parameters(), lr=hp.gen_lr)

    x = torch.as_tensor(shard.train_x, dtype=w_student.dtype)
    y = torch.as_tensor(shard.train_y, dtype=torch.long)
    trace = []
    for epoch in range(hp.epochs):
        for b, idx in enumerate(epoch_batches(len(y), hp.batch_size, order_rng)):
            where = f"client {k}, epoch {epoch}, batch {b}"
            z = None
            if gen is not None:
                z = torch.randn(len(idx), hp.generator.noise_dim, generator=noise_rng, dtype=w_student.dtype)
            loss_g = float("nan")
            if hp.train_generator:
                g = _generator_update(gen, teacher, z, opt_g, hp.gen_weights)
                _check_finite(g, "generator loss", where)
                loss_g = float(g)
            s = _student_update(student, teacher, gen, z, x[idx], y[idx], opt_s, hp.fusion)
            _check_finite(s, "student loss", where)
            trace.append((loss_g, float(s)))

    if debug_dir is not None and gen is not None:
        dump_pseudo_samples(gen, hp.generator, Path(debug_dir) / f"client{k:03d}.png", seed)
    return ClientUpdateResult(weights_from_module(student, w_student.arch_id), trace)


# --------------------------------------------------------------------------
# Single functional steps (plain gradient descent)


def _leaf_params(w: ModelWeights) -> dict[str, torch.Tensor]:
    return {k: v.clone().requires_grad_(True) for k, v in w.entries.items()}


def generator_loss(theta: ModelWeights | dict, w_teacher: ModelWeights, z, gw: GenLossWeights, arch_id=None):
    """``L_G`` as a differentiable function of the generator parameters."""
    params = theta.entries if isinstance(theta, ModelWeights) else theta
    arch_id = arch_id or theta.arch_id
    x_g = functional_call(_template(arch_id), dict(params), (torch.as_tensor(z, dtype=w_teacher.dtype),))
    logits, feats = forward_classifier(w_teacher, x_g)
    return generator_objective(logits, feats, gw)


def generator_step(theta: ModelWeights, w_teacher: ModelWeights, z, beta: float, gw: GenLossWeights) -> ModelWeights:
    """``theta - beta * grad L_G``; the teacher is held fixed."""
    params = _leaf_params(theta)
    loss = generator_loss(params, w_teacher, z, gw, arch_id=theta.arch_id)
    grads = torch.autograd.grad(loss, list(params.values()))
    with torch.no_grad():
        new = {k: p - beta * g for (k, p), g in zip(params.items(), grads)}
    return ModelWeights(theta.arch_id, new)


def student_loss(w_student, w_teacher: ModelWeights, theta: ModelWeights, z, batch, fusion: FusionWeights, arch_id=None):
    """``L_S`` with teacher and generator outputs treated as constants."""
    params = w_student.entries if isinstance(w_student, ModelWeights) else w_student
    arch_id = arch_id or w_student.arch_id
    xb, yb = batch
    xb = torch.as_tensor(xb, dtype=w_teacher.dtype)
    logits, _ = functional_call(_template(arch_id), dict(params), (xb,))
    ce = loss_student_ce(logits, yb)
    if fusion.gamma == 0:
        return ce
    with torch.no_grad():
        x_g = functional_call(_template(theta.arch_id), dict(theta.entries), (torch.as_tensor(z, dtype=w_teacher.dtype),))
        t_logits, _ = forward_classifier(w_teacher, x_g)
    s_logits, _ = functional_call(_template(arch_id), dict(params), (x_g,))
    return loss_student_total(ce, loss_kd_kl(t_logits, s_logits), fusion)


def student_step(w_student, w_teacher, theta, z, batch, eta: float, fusion: FusionWeights) -> ModelWeights:
    """``w_S - eta * grad L_S``."""
    params = _leaf_params(w_student)
    loss = student_loss(params, w_teacher, theta, z, batch, fusion, arch_id=w_student.arch_id)
    grads = torch.autograd.grad(loss, list(params.values()))
    with torch.no_grad():
        new = {k: p - eta * g for (k, p), g in zip(params.items(), grads)}
    return ModelWeights(w_student.arch_id, new)


def dump_pseudo_samples(gen, arch: ArchSpec, path: Path, seed: int, n: int = 64):
    """Save a grid of generated samples (image-shaped generators only)."""
    if len(arch.input_shape) != 3:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        z = torch.randn(n, arch.noise_dim, generator=g, dtype=next(gen.parameters()).dtype)
        imgs = gen(z).float().numpy()
    side = int(math.ceil(math.sqrt(n)))
    fig, axes = plt.subplots(side, side, figsize=(side, side))
    for ax, img in zip(axes.flat, imgs):
        ax.imshow(img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0), cmap="gray", vmin=0, vmax=1)
    for ax in axes.flat:
        ax.axis("off")
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80)
    plt.close(fig)
