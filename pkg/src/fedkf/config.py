"""Declarative experiment configuration.

Configs are YAML trees; every key must be known, so typos fail loudly. A
resolved config (all defaults materialized) is written next to each run and can
be fed back in to replay it.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .baselines import ALGORITHMS, AlgorithmSpec
from .client import ClientHyperparams
from .data import PartitionSpec
from .errors import ConfigError, ValidationError
from .losses import FusionWeights, GenLossWeights
from .models import ArchSpec

FAILURE_POLICIES = ("abort", "drop")


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "synthetic"
    data_dir: str | None = None
    emnist_split: str = "balanced"
    # The fields below only apply to the synthetic Gaussian-blob dataset.
    num_classes: int = 10
    samples_per_class: int = 100
    shape: tuple[int, ...] = (16,)
    separation: float = 3.0
    synthetic_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))


@dataclass(frozen=True)
class ModelConfig:
    classifier: str = "tiny_mlp"
    hidden: int = 16
    generator: str = "tiny_gen"
    noise_dim: int = 100
    gen_hidden: int = 32
    gen_width: int = 64


@dataclass(frozen=True)
class ClientConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    gen_lr: float = 0.001
    gen_optimizer: str = "adam"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionSpec = field(default_factory=lambda: PartitionSpec(num_clients=20, alpha=0.1))
    model: ModelConfig = field(default_factory=ModelConfig)
    algorithm: AlgorithmSpec = field(default_factory=AlgorithmSpec)
    client: ClientConfig = field(default_factory=ClientConfig)
    rounds: int = 100
    tau: float = 0.2
    eval_every: int = 1
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/experiment"
    checkpoint_every: int = 0
    failure_policy: str = "abort"
    log_aca: bool = False
    # Per-algorithm parameter overrides used by ``with_algorithm``.
    tuned_params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0 < self.tau <= 1:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if self.failure_policy not in FAILURE_POLICIES:
            raise ConfigError(f"failure_policy must be one of {FAILURE_POLICIES}")
        unknown = set(self.tuned_params) - set(ALGORITHMS)
        if unknown:
            raise ConfigError(f"tuned_params has unknown algorithms {sorted(unknown)}")

    # -- derived objects ---------------------------------------------------

    def num_classes_hint(self) -> int | None:
        if self.dataset.name == "synthetic":
            return self.dataset.num_classes
        return {"cifar10": 10, "cifar100": 100}.get(self.dataset.name)

    def classifier_arch(self, input_shape, num_classes: int | None = None) -> ArchSpec:
        if num_classes is None:
            num_classes = self._num_classes
        return ArchSpec(self.model.classifier, tuple(input_shape), num_classes=num_classes, hidden=self.model.hidden)

    def generator_arch(self, input_shape) -> ArchSpec:
        hidden = self.model.gen_hidden
        return ArchSpec(self.model.generator, tuple(input_shape), noise_dim=self.model.noise_dim, hidden=hidden, width=self.model.gen_width)

    def client_hyperparams(self, classifier: ArchSpec) -> ClientHyperparams:
        p = self.algorithm.params
        fedkf = self.algorithm.name == "fedkf"
        return ClientHyperparams(
            epochs=self.client.epochs,
            batch_size=self.client.batch_size,
            lr=self.client.lr,
            gen_lr=self.client.gen_lr,
            gen_weights=GenLossWeights(p.get("lambda1", 0.01), p.get("lambda2", 0.1)) if fedkf else GenLossWeights(),
            fusion=FusionWeights(p["gamma"] if fedkf else 0.0),
            generator=self.generator_arch(classifier.input_shape) if fedkf else None,
            gen_optimizer=self.client.gen_optimizer,
            train_generator=bool(p.get("train_generator", False)) if fedkf else False,
        )

    def with_algorithm(self, name: str, use_t1: bool | None = None, **params) -> "ExperimentConfig":
        use_t1 = self.algorithm.use_t1 if use_t1 is None else use_t1
        if name == "qffl":
            use_t1 = False
        merged = {**self.tuned_params.get(name, {}), **params}
        return dataclasses.replace(self, algorithm=AlgorithmSpec(name, use_t1, merged))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        d = _plain(dataclasses.asdict(self))
        d["algorithm"] = {"name": self.algorithm.name, "use_t1": self.algorithm.use_t1, "params": dict(self.algorithm.params)}
        return d

    def comparison_key(self) -> dict:
        """Everything that must match for two runs to share a report table."""
        d = self.to_dict()
        for k in ("name", "algorithm", "seeds", "output_dir", "tuned_params", "checkpoint_every", "failure_policy", "log_aca"):
            d.pop(k)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = copy.deepcopy(data or {})
        _reject_unknown(cls, data, "config")
        kwargs: dict[str, Any] = {}
        nested = {"dataset": DatasetConfig, "partition": PartitionSpec, "model": ModelConfig, "client": ClientConfig}
        try:
            for key, value in data.items():
                if key in nested:
                    if not isinstance(value, dict):
                        raise ConfigError(f"{key} must be a mapping")
                    _reject_unknown(nested[key], value, key)
                    kwargs[key] = nested[key](**value)
                elif key == "algorithm":
                    if not isinstance(value, dict):
                        raise ConfigError("algorithm must be a mapping")
                    unknown = set(value) - {"name", "use_t1", "params"}
                    if unknown:
                        raise ConfigError(f"unknown algorithm keys {sorted(unknown)}")
                    kwargs[key] = AlgorithmSpec(value.get("name", "fedkf"), bool(value.get("use_t1", True)), value.get("params") or {})
                else:
                    kwargs[key] = value
            return cls(**kwargs)
        except ConfigError:
            raise
        except (ValidationError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def _num_classes(self) -> int:
        n = self.num_classes_hint()
        if n is None:
            raise ConfigError(f"number of classes for {self.dataset.name} is only known after loading it")
        return n


def _reject_unknown(cls, data: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config(path) -> ExperimentConfig:
    """Load a YAML config; ``preset:NAME`` loads a shipped preset."""
    text = preset_text(str(path)[7:]) if str(path).startswith("preset:") else Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} does not contain a mapping")
    return ExperimentConfig.from_dict(data)


def dump_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    return path


def list_presets() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("fedkf.presets").iterdir() if p.name.endswith(".yaml"))


def preset_text(name: str) -> str:
    path = resources.files("fedkf.presets") / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"no preset named {name!r}; available: {list_presets()}")
    return path.read_text()
