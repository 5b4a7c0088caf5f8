"""Experiment configuration: YAML file + dotted overrides, validated at parse time."""

from __future__ import annotations

import copy
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import AugmentConfig
from .errors import InvalidConfig
from .models import EncoderConfig
from .probe import ProbeConfig

METHODS = ("dcco", "fedavg_cco", "fedavg_contrastive", "centralized_cco")
FEDAVG_METHODS = ("fedavg_cco", "fedavg_contrastive")


@dataclass(frozen=True)
class DatasetSpec:
    format: str = "synthetic"
    path: str | None = None
    test_path: str | None = None
    # Synthetic generator options; ``n`` is the pretraining pool size and
    # ``test_size`` extra samples are drawn from the same classes for testing.
    classes: int = 10
    dim: int = 64
    n: int = 2000
    test_size: int = 1000
    seed: int = 0
    separation: float = 5.0
    noise: float = 1.0
    nuisance_rank: int = 8
    nuisance_scale: float = 1.0


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 1000
    samples_per_client: int = 2
    alpha: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class ServerOptimizerConfig:
    # Plain SGD at lr 1.0 applies the averaged delta as is, which is the
    # setting in which a round equals a centralized step. Presets pick Adam
    # or LARS explicitly.
    kind: str = "sgd"
    lr: float = 1.0
    schedule: str = "constant"
    momentum: float = 0.9
    weight_decay: float = 0.0
    trust_coefficient: float = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    server_optimizer: ServerOptimizerConfig = field(default_factory=ServerOptimizerConfig)
    probes: tuple[ProbeConfig, ...] = (ProbeConfig(protocol="linear"),)
    method: str = "dcco"
    rounds: int = 2000
    clients_per_round: int = 32
    local_steps: int = 1
    allow_multi_step: bool = False
    local_lr: float = 1.0
    lam: float = 20.0
    temperature: float = 0.1
    eps: float = 1e-8
    dropout_prob: float = 0.0
    # Cadences as fractions of total rounds.
    checkpoint_every: float = 0.05
    probe_every: float = 0.1
    seed: int = 0
    workers: int = 1
    output_dir: str = "runs/default"

    def validate(self) -> None:
        if self.method not in METHODS:
            raise InvalidConfig(f"method must be one of {METHODS}, got {self.method!r}", "method")
        if self.rounds < 1:
            raise InvalidConfig("rounds must be >= 1", "rounds")
        if self.clients_per_round < 1:
            raise InvalidConfig("clients_per_round must be >= 1", "clients_per_round")
        if self.clients_per_round > self.partition.num_clients:
            raise InvalidConfig(
                f"clients_per_round={self.clients_per_round} exceeds "
                f"partition.num_clients={self.partition.num_clients}", "clients_per_round")
        if self.method in FEDAVG_METHODS and self.partition.samples_per_client < 2:
            raise InvalidConfig(
                f"{self.method} needs partition.samples_per_client >= 2 "
                f"(got {self.partition.samples_per_client}); within-client losses are "
                "undefined for one sample", "partition.samples_per_client")
        if self.local_steps < 1:
            raise InvalidConfig("local_steps must be >= 1", "local_steps")
        if self.local_steps > 1 and not self.allow_multi_step:
            raise InvalidConfig("local_steps > 1 requires allow_multi_step: true", "local_steps")
        if self.local_lr <= 0:
            raise InvalidConfig("local_lr must be > 0", "local_lr")
        if self.encoder.input_dim != self.dataset.dim and self.dataset.format == "synthetic":
            raise InvalidConfig(
                f"encoder.input_dim={self.encoder.input_dim} but dataset.dim={self.dataset.dim}",
                "encoder.input_dim")
        if self.encoder.out_dim < 2 and self.method != "fedavg_contrastive":
            raise InvalidConfig("CCO loss needs a projection output of at least 2",
                                "encoder.projection_dims")
        if self.server_optimizer.kind not in ("sgd", "adam", "lars"):
            raise InvalidConfig(f"unknown optimizer {self.server_optimizer.kind!r}",
                                "server_optimizer.kind")
        if self.server_optimizer.schedule not in ("cosine", "constant"):
            raise InvalidConfig("schedule must be 'cosine' or 'constant'",
                                "server_optimizer.schedule")
        if self.server_optimizer.lr < 0:
            raise InvalidConfig("server_optimizer.lr must be >= 0", "server_optimizer.lr")
        for name in ("checkpoint_every", "probe_every"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise InvalidConfig(f"{name} must be in (0, 1]", name)
        if self.workers < 1:
            raise InvalidConfig("workers must be >= 1", "workers")
        if not 0 <= self.dropout_prob < 1:
            raise InvalidConfig("dropout_prob must be in [0, 1)", "dropout_prob")
        if self.lam < 0:
            raise InvalidConfig("lam must be >= 0", "lam")
        if self.temperature <= 0:
            raise InvalidConfig("temperature must be > 0", "temperature")
        if self.eps < 0:
            raise InvalidConfig("eps must be >= 0", "eps")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["encoder"] = self.encoder.to_dict()
        out["probes"] = [dataclasses.asdict(p) for p in self.probes]
        return out


_SECTIONS = {
    "dataset": DatasetSpec,
    "partition": PartitionConfig,
    "encoder": EncoderConfig,
    "augment": AugmentConfig,
    "server_optimizer": ServerOptimizerConfig,
}


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise InvalidConfig(f"{where} must be a mapping", where)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise InvalidConfig(f"unknown field {where}.{key}", f"{where}.{key}")
    _check_scalar_types(cls, raw, f"{where}.")
    try:
        return cls(**raw)
    except InvalidConfig as exc:
        field_name = f"{where}.{exc.field}" if exc.field else where
        raise InvalidConfig(str(exc), field_name) from None
    except TypeError as exc:
        raise InvalidConfig(str(exc), where) from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = copy.deepcopy(raw or {})
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in raw:
        if key not in known:
            raise InvalidConfig(f"unknown field {key}", key)
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        elif key == "probes":
            if not isinstance(value, list):
                raise InvalidConfig("probes must be a list", "probes")
            kwargs[key] = tuple(_build(ProbeConfig, p, f"probes[{i}]") for i, p in enumerate(value))
        else:
            kwargs[key] = value
    _check_scalar_types(ExperimentConfig, kwargs)
    config = ExperimentConfig(**kwargs)
    config.validate()
    return config


def _check_scalar_types(cls, values: dict, prefix: str = "") -> None:
    """Reject values whose type disagrees with a scalar field's default."""
    for f in dataclasses.fields(cls):
        if f.name not in values or f.default is dataclasses.MISSING or f.default is None:
            continue
        value = values[f.name]
        default = f.default
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, str):
            ok = isinstance(value, str)
        else:
            continue
        if not ok:
            raise InvalidConfig(f"{prefix}{f.name} has invalid value {value!r}", f"{prefix}{f.name}")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"""),
    list("-+0123456789"),
)


def _yaml_load(text: str) -> Any:
    return yaml.load(text, Loader=_Loader)


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise InvalidConfig(f"override {text!r} must look like key=value", text)
    key, value = text.split("=", 1)
    return key.strip().split("."), _yaml_load(value)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = copy.deepcopy(raw)
    for text in overrides:
        path, value = parse_override(text)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InvalidConfig(f"cannot set {'.'.join(path)}", ".".join(path))
        node[path[-1]] = value
    return raw


def load_raw(path) -> dict:
    try:
        raw = _yaml_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"cannot parse {path}: {exc}", str(path)) from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise InvalidConfig(f"{path} must contain a mapping", str(path))
    return raw


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
