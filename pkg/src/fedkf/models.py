"""Classifier and generator architectures, immutable weight containers, and
pure forward functions.

Networks are plain ``torch.nn.Module`` templates; weights travel separately as
:class:`ModelWeights` and are bound at call time with
``torch.func.functional_call``, so a forward pass is a pure function of
(weights, input).

Architectures
-------------
``tiny_mlp``   linear -> tanh -> linear; the tanh activations are the features.
``lenet5``     conv5(6) -> GN -> relu -> pool -> conv5(16) -> GN -> relu -> pool
               -> fc120 -> fc84 -> fc(C); features are the 84-d activations.
``resnet8``    conv3(16) -> GN -> relu, then three stages of one basic block each
               (16, 32, 64 channels; stride 1, 2, 2), global average pooling and a
               linear head. Eight weighted layers; 1x1 shortcut projections are
               not counted.
``tiny_gen``   linear -> tanh -> linear -> sigmoid.
``dcgen``      linear -> BN -> (upsample, conv3, BN, leaky relu) x 2 -> conv3
               -> sigmoid.

All classifier normalization is group normalization with one channel per group,
so classifiers carry no batch statistics. Generator batch normalization does
not track running statistics and always normalizes with the current batch.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .errors import ConfigError, ShapeError, ValidationError

CLASSIFIERS = ("lenet5", "resnet8", "tiny_mlp")
GENERATORS = ("dcgen", "tiny_gen")


@dataclass(frozen=True)
class ArchSpec:
    """Static description of a network. ``arch_id`` is its canonical string form."""

    name: str
    input_shape: tuple[int, ...]
    num_classes: int = 0
    hidden: int = 16
    noise_dim: int = 100
    width: int = 64

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.name not in CLASSIFIERS + GENERATORS:
            raise ConfigError(f"unknown architecture {self.name!r}")
        if self.is_classifier and self.num_classes < 1:
            raise ConfigError("classifier architectures need num_classes >= 1")
        if self.name in ("lenet5", "resnet8", "dcgen") and len(self.input_shape) != 3:
            raise ConfigError(f"{self.name} expects a (channels, height, width) input shape")
        if self.name == "dcgen" and (self.input_shape[1] % 4 or self.input_shape[2] % 4):
            raise ConfigError("dcgen output height and width must be multiples of 4")

    @property
    def is_classifier(self) -> bool:
        return self.name in CLASSIFIERS

    @property
    def arch_id(self) -> str:
        parts = [self.name, "in=" + "x".join(map(str, self.input_shape))]
        if self.is_classifier:
            parts.append(f"c={self.num_classes}")
        else:
            parts.append(f"z={self.noise_dim}")
        if self.name in ("tiny_mlp", "tiny_gen"):
            parts.append(f"h={self.hidden}")
        if self.name == "dcgen":
            parts.append(f"w={self.width}")
        return "/".join(parts)

    @classmethod
    def from_id(cls, arch_id: str) -> "ArchSpec":
        name, *fields = arch_id.split("/")
        kwargs: dict = {}
        keys = {"c": "num_classes", "z": "noise_dim", "h": "hidden", "w": "width"}
        for f in fields:
            key, _, value = f.partition("=")
            if key == "in":
                kwargs["input_shape"] = tuple(int(v) for v in value.split("x"))
            elif key in keys:
                kwargs[keys[key]] = int(value)
            else:
                raise ConfigError(f"malformed arch id {arch_id!r}")
        return cls(name, **kwargs)


# --------------------------------------------------------------------------
# Modules


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(channels, channels)


class TinyMLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, num_classes: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

    def forward(self, x):
        feats = torch.tanh(self.fc1(x.flatten(1)))
        return self.fc2(feats), feats


class LeNet5(nn.Module):
    def __init__(self, input_shape, num_classes: int):
        super().__init__()
        c, h, w = input_shape
        pad = 2 if h <= 28 else 0
        self.conv1 = nn.Conv2d(c, 6, 5, padding=pad)
        self.norm1 = _gn(6)
        self.conv2 = nn.Conv2d(6, 16, 5)
        self.norm2 = _gn(16)
        h1, w1 = (h + 2 * pad - 4) // 2, (w + 2 * pad - 4) // 2
        h2, w2 = (h1 - 4) // 2, (w1 - 4) // 2
        self.fc1 = nn.Linear(16 * h2 * w2, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, num_classes)

    def forward(self, x):
        x = nn.functional.max_pool2d(torch.relu(self.norm1(self.conv1(x))), 2)
        x = nn.functional.max_pool2d(torch.relu(self.norm2(self.conv2(x))), 2)
        x = torch.relu(self.fc1(x.flatten(1)))
        feats = torch.relu(self.fc2(x))
        return self.fc3(feats), feats


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.norm1 = _gn(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.norm2 = _gn(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), _gn(c_out))

    def forward(self, x):
        out = torch.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return torch.relu(out + skip)


class ResNet8(nn.Module):
    def __init__(self, input_shape, num_classes: int):
        super().__init__()
        self.conv = nn.Conv2d(input_shape[0], 16, 3, 1, 1, bias=False)
        self.norm = _gn(16)
        self.stage1 = BasicBlock(16, 16, 1)
        self.stage2 = BasicBlock(16, 32, 2)
        self.stage3 = BasicBlock(32, 64, 2)
        self.fc = nn.Linear(64, num_classes)

    def forward(self, x):
        x = torch.relu(self.norm(self.conv(x)))
        x = self.stage3(self.stage2(self.stage1(x)))
        feats = x.mean(dim=(2, 3))
        return self.fc(feats), feats


class TinyGen(nn.Module):
    def __init__(self, noise_dim: int, hidden: int, out_shape):
        super().__init__()
        self.out_shape = tuple(out_shape)
        self.fc1 = nn.Linear(noise_dim, hidden)
        self.fc2 = nn.Linear(hidden, int(np.prod(out_shape)))

    def forward(self, z):
        x = torch.sigmoid(self.fc2(torch.tanh(self.fc1(z))))
        return x.view(-1, *self.out_shape)


class DCGen(nn.Module):
    def __init__(self, noise_dim: int, out_shape, width: int = 64):
        super().__init__()
        c, h, w = out_shape
        self.init_hw = (h // 4, w // 4)
        self.fc = nn.Linear(noise_dim, 2 * width * self.init_hw[0] * self.init_hw[1])
        self.norm0 = nn.BatchNorm2d(2 * width, track_running_stats=False)
        self.conv1 = nn.Conv2d(2 * width, 2 * width, 3, 1, 1)
        self.norm1 = nn.BatchNorm2d(2 * width, track_running_stats=False)
        self.conv2 = nn.Conv2d(2 * width, width, 3, 1, 1)
        self.norm2 = nn.BatchNorm2d(width, track_running_stats=False)
        self.conv3 = nn.Conv2d(width, c, 3, 1, 1)
        self.width = width

    def forward(self, z):
        x = self.fc(z).view(len(z), 2 * self.width, *self.init_hw)
        x = self.norm0(x)
        x = nn.functional.interpolate(x, scale_factor=2)
        x = nn.functional.leaky_relu(self.norm1(self.conv1(x)), 0.2)
        x = nn.functional.interpolate(x, scale_factor=2)
        x = nn.functional.leaky_relu(self.norm2(self.conv2(x)), 0.2)
        return torch.sigmoid(self.conv3(x))


def build_module(arch: ArchSpec) -> nn.Module:
    """Instantiate the (randomly initialized) module for ``arch``."""
    shape = arch.input_shape
    if arch.name == "tiny_mlp":
        return TinyMLP(int(np.prod(shape)), arch.hidden, arch.num_classes)
    if arch.name == "lenet5":
        return LeNet5(shape, arch.num_classes)
    if arch.name == "resnet8":
        return ResNet8(shape, arch.num_classes)
    if arch.name == "tiny_gen":
        return TinyGen(arch.noise_dim, arch.hidden, shape)
    if arch.name == "dcgen":
        return DCGen(arch.noise_dim, shape, arch.width)
    raise ConfigError(f"unknown architecture {arch.name!r}")


@functools.lru_cache(maxsize=64)
def _template(arch_id: str) -> nn.Module:
    return build_module(ArchSpec.from_id(arch_id)).requires_grad_(False)


# --------------------------------------------------------------------------
# Weights


class ModelWeights:
    """Ordered, named parameter tensors of one network.

    Instances are treated as values: constructors copy the tensors and nothing
    in the package mutates them afterwards.
    """

    __slots__ = ("arch_id", "entries")

    def __init__(self, arch_id: str, entries: Mapping[str, torch.Tensor], copy: bool = True):
        tensors = {}
        for name, t in entries.items():
            t = torch.as_tensor(t).detach()
            tensors[name] = t.clone() if copy else t
        object.__setattr__(self, "arch_id", arch_id)
        object.__setattr__(self, "entries", MappingProxyType(tensors))

    def __setattr__(self, key, value):
        raise AttributeError("ModelWeights is immutable")

    def __repr__(self):
        return f"ModelWeights({self.arch_id!r}, {self.num_params} params, {self.dtype})"

    @property
    def arch(self) -> ArchSpec:
        return ArchSpec.from_id(self.arch_id)

    @property
    def names(self) -> list[str]:
        return list(self.entries)

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.entries.items()}

    @property
    def num_params(self) -> int:
        return sum(v.numel() for v in self.entries.values())

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.entries.values())).dtype

    def flat(self) -> torch.Tensor:
        return torch.cat([v.reshape(-1) for v in self.entries.values()])

    def split(self, vector) -> dict[str, torch.Tensor]:
        """Slice a flat vector into named tensors of this layout, keeping autograd history."""
        vector = torch.as_tensor(vector)
        if vector.numel() != self.num_params:
            raise ShapeError(f"expected {self.num_params} values, got {vector.numel()}")
        out, offset = {}, 0
        for name, t in self.entries.items():
            out[name] = vector[offset : offset + t.numel()].reshape(t.shape).to(t.dtype)
            offset += t.numel()
        return out

    def unflatten(self, vector) -> "ModelWeights":
        """New weights with this layout, filled from a flat vector."""
        return ModelWeights(self.arch_id, self.split(vector))

    def to(self, dtype) -> "ModelWeights":
        return ModelWeights(self.arch_id, {k: v.to(dtype) for k, v in self.entries.items()})

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: v.numpy().copy() for k, v in self.entries.items()}

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.entries.values())

    def same_layout(self, other: "ModelWeights") -> bool:
        return self.arch_id == other.arch_id and self.shapes == other.shapes

    def equal(self, other: "ModelWeights") -> bool:
        """Bit-level equality of layout and values."""
        return self.same_layout(other) and all(
            torch.equal(v, other.entries[k]) for k, v in self.entries.items()
        )

    def max_abs_diff(self, other: "ModelWeights") -> float:
        if not self.same_layout(other):
            raise ValidationError("cannot compare weights of different architectures")
        return max(
            float((v - other.entries[k]).abs().max()) if v.numel() else 0.0
            for k, v in self.entries.items()
        )


def weighted_average(weights: Sequence[ModelWeights], coeffs) -> ModelWeights:
    """Element-wise ``sum_i coeffs[i] * weights[i] / sum(coeffs)``.

    Accumulates in float64 and casts back to the inputs' dtype.
    """
    if not weights:
        raise ValidationError("cannot average an empty set of weights")
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (len(weights),):
        raise ValidationError(f"{len(weights)} weight sets but {coeffs.size} coefficients")
    total = coeffs.sum()
    if not total > 0 or (coeffs < 0).any():
        raise ValidationError("coefficients must be non-negative with a positive sum")
    first = weights[0]
    for w in weights[1:]:
        if not w.same_layout(first):
            raise ValidationError(f"cannot average {w.arch_id} with {first.arch_id}")
    c = torch.as_tensor(coeffs / total)
    out = {}
    for name, t in first.entries.items():
        stacked = torch.stack([w.entries[name].to(torch.float64) for w in weights])
        out[name] = torch.tensordot(c, stacked, dims=1).to(t.dtype)
    return ModelWeights(first.arch_id, out, copy=False)


def weights_from_module(module: nn.Module, arch_id: str) -> ModelWeights:
    return ModelWeights(arch_id, dict(module.named_parameters()))


def module_from_weights(w: ModelWeights, trainable: bool = True) -> nn.Module:
    """A fresh module holding a private copy of ``w``."""
    module = build_module(w.arch).to(w.dtype)
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(w.entries[name])
    return module.requires_grad_(trainable)


def _init_weights(arch: ArchSpec, seed: int, dtype) -> ModelWeights:
    module = build_module(arch)
    rng = np.random.default_rng(seed)
    entries = {}
    for mod_name, mod in module.named_modules():
        params = dict(mod.named_parameters(recurse=False))
        if not params:
            continue
        is_norm = isinstance(mod, (nn.GroupNorm, nn.BatchNorm2d))
        fan_in = params["weight"][0].numel() if "weight" in params else 1
        bound = 1.0 / math.sqrt(fan_in)
        for pname, p in params.items():
            full = f"{mod_name}.{pname}" if mod_name else pname
            if is_norm:
                value = np.ones(p.shape) if pname == "weight" else np.zeros(p.shape)
            else:
                value = rng.uniform(-bound, bound, size=p.shape)
            entries[full] = torch.as_tensor(value, dtype=dtype)
    ordered = {name: entries[name] for name, _ in module.named_parameters()}
    return ModelWeights(arch.arch_id, ordered, copy=False)


def init_classifier(arch: ArchSpec, seed: int, dtype=torch.float32) -> ModelWeights:
    """Fan-in-scaled uniform initialization; deterministic in ``seed``."""
    if not arch.is_classifier:
        raise ConfigError(f"{arch.name} is not a classifier architecture")
    return _init_weights(arch, seed, dtype)


def init_generator(arch: ArchSpec, seed: int, dtype=torch.float32) -> ModelWeights:
    if arch.is_classifier:
        raise ConfigError(f"{arch.name} is not a generator architecture")
    return _init_weights(arch, seed, dtype)


# --------------------------------------------------------------------------
# Forward functions


def _as_input(x, dtype) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def forward_classifier(w: ModelWeights, batch, params: Mapping[str, torch.Tensor] | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(logits, features)`` for a batch of inputs.

    Differentiable with respect to ``batch``. Pass ``params`` (same names as
    ``w.entries``) to differentiate with respect to the weights as well.
    """
    arch = w.arch
    if not arch.is_classifier:
        raise ConfigError(f"{arch.name} is not a classifier architecture")
    x = _as_input(batch, w.dtype)
    if tuple(x.shape[1:]) != arch.input_shape:
        raise ShapeError(f"{arch.name} expects inputs of shape {arch.input_shape}, got {tuple(x.shape[1:])}")
    return functional_call(_template(w.arch_id), dict(w.entries if params is None else params), (x,))


def forward_generator(theta: ModelWeights, z, params: Mapping[str, torch.Tensor] | None = None) -> torch.Tensor:
    """Map noise vectors ``z`` (n x noise_dim) to pseudo-samples in (0, 1)."""
    arch = theta.arch
    if arch.is_classifier:
        raise ConfigError(f"{arch.name} is not a generator architecture")
    z = _as_input(z, theta.dtype)
    if z.dim() != 2 or z.shape[1] != arch.noise_dim:
        raise ShapeError(f"expected noise of shape (n, {arch.noise_dim}), got {tuple(z.shape)}")
    return functional_call(_template(theta.arch_id), dict(theta.entries if params is None else params), (z,))


def softmax(logits):
    """Max-shifted softmax over the last axis, for numpy arrays or tensors."""
    if isinstance(logits, torch.Tensor):
        return torch.softmax(logits, dim=-1)
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@torch.no_grad()
def predict(w: ModelWeights, x, batch_size: int = 1024) -> np.ndarray:
    """Argmax class predictions."""
    x = _as_input(x, w.dtype)
    out = [forward_classifier(w, x[i : i + batch_size])[0].argmax(dim=1) for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy() if out else np.empty(0, dtype=np.int64)


# --------------------------------------------------------------------------
# Checkpoints


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(directory, w: ModelWeights, round_index: int | None = None) -> Path:
    """Write ``manifest.json`` plus ``weights.bin`` (little-endian float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs, entries, offset = [], [], 0
    for name, t in w.entries.items():
        raw = t.detach().cpu().numpy().astype("<f4").tobytes()
        entries.append(
            {"name": name, "shape": list(t.shape), "offset": offset, "count": t.numel(), "sha256": _sha256(raw)}
        )
        blobs.append(raw)
        offset += t.numel()
    blob = b"".join(blobs)
    (directory / "weights.bin").write_bytes(blob)
    manifest = {
        "arch_id": w.arch_id,
        "round": round_index,
        "dtype": "float32-le",
        "entries": entries,
        "sha256": _sha256(blob),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def load_checkpoint(directory) -> tuple[ModelWeights, int | None]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = (directory / "weights.bin").read_bytes()
    if _sha256(blob) != manifest["sha256"]:
        raise ValidationError(f"checksum mismatch in {directory}")
    values = np.frombuffer(blob, dtype="<f4")
    entries = {}
    for e in manifest["entries"]:
        chunk = values[e["offset"] : e["offset"] + e["count"]]
        entries[e["name"]] = torch.from_numpy(chunk.astype(np.float32).reshape(e["shape"]))
    return ModelWeights(manifest["arch_id"], entries), manifest["round"]
