"""Experiment configuration: a strict YAML schema mapped onto dataclasses.

Every section and key is optional and falls back to the defaults below; any key
not in the schema is rejected with its dotted path. The resolved configuration
(defaults filled in, overrides applied) hashes to a stable run id.

Example::

    seed: 0
    data: {source: synthetic, num_classes: 4, seed: 1}
    model: {arch: miniconv}
    train: {epochs: 30, lr: 0.001}
    quant: {bits: [8, 7, 6, 5], granularity: layer_wise}
    attack: {kind: backdoor, trigger_size: 4, target_class: 0}
    eval: {bits: [32, 8, 7, 6, 5, 4], victim_schemes: [layer_wise, channel_wise]}
    output: {dir: runs/backdoor}
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class DataSection:
    source: str = "synthetic"  # synthetic | cifar10
    num_classes: int = 4
    per_class: int = 150
    size: int = 16
    channels: int = 3
    noise_std: float = 0.15
    class_contrast: float = 0.2
    cifar_paths: list = field(default_factory=list)
    cifar_limit: typing.Optional[int] = None
    test_fraction: float = 1 / 3
    seed: int = 1


@dataclass
class ModelSection:
    arch: str = "miniconv"  # miniconv | mlp
    hidden: list = field(default_factory=lambda: [64])


@dataclass
class TrainSection:
    epochs: int = 30
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.0
    batch_size: int = 32


@dataclass
class QuantSection:
    bits: list = field(default_factory=lambda: [8, 7, 6, 5])
    granularity: str = "layer_wise"
    variant: str = "vanilla"
    quantize_activations: bool = True
    act_clip: bool = False
    ocs_expand_ratio: float = 0.05


@dataclass
class AttackSection:
    kind: typing.Optional[str] = None
    # lambda/alpha/beta left empty take the per-kind defaults
    lam: typing.Optional[float] = None
    alpha: typing.Optional[float] = None
    beta: typing.Optional[float] = None
    bits: typing.Optional[list] = None  # defaults to quant.bits
    target_class: typing.Optional[int] = None
    # targeted-sample: index into the test split and the label to force
    target_index: typing.Optional[int] = None
    target_label: typing.Optional[int] = None
    trigger_size: int = 4
    backdoor_ratio: float = 1.0
    smooth_factor: typing.Optional[float] = None
    hessian_probes: int = 4
    epochs: typing.Optional[int] = None  # attack plan falls back to train.*
    lr: typing.Optional[float] = None
    optimizer: typing.Optional[str] = None
    batch_size: typing.Optional[int] = None


@dataclass
class EvalSection:
    bits: list = field(default_factory=lambda: [32, 8, 7, 6, 5, 4])
    victim_schemes: list = field(default_factory=lambda: ["layer_wise"])
    noise_baseline: bool = False
    noise_trials: int = 20
    noise_bits: int = 8
    hessian: bool = False
    hessian_probes: int = 10
    hessian_samples: int = 200
    hessian_repeats: int = 10
    finetune_fraction: float = 0.1
    finetune_epochs: int = 10
    noise_defense_trials: int = 10


@dataclass
class FedSection:
    num_participants: int = 20
    compromised_ids: list = field(default_factory=lambda: [0, 1])
    participants_per_round: int = 5
    local_epochs: int = 1
    local_batch_size: int = 32
    local_lr: float = 0.01
    local_optimizer: str = "sgd"
    rounds: int = 40
    attack_start_round: int = 20
    shard_size: typing.Optional[int] = None
    eval_bits: list = field(default_factory=lambda: [8, 4])


@dataclass
class SweepSection:
    # dotted key to vary, e.g. attack.beta
    key: str = "attack.beta"
    values: list = field(default_factory=lambda: [0.1, 0.25, 0.5, 1.0])
    # targeted-sample sweeps: number of seeded targets, one per class
    target_samples: int = 10


@dataclass
class OutputSection:
    dir: str = "runs"
    formats: list = field(default_factory=lambda: ["csv", "json"])


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    quant: QuantSection = field(default_factory=QuantSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    fed: FedSection = field(default_factory=FedSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def run_id(self) -> str:
        """First 16 hex digits of the SHA-256 of the canonical resolved config."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_value(self, dotted: str, value) -> "ExperimentConfig":
        """Copy with one dotted key replaced (validated like a config file entry)."""
        d = self.to_dict()
        node = d
        parts = [_ALIASES.get(p, p) for p in dotted.split(".")]
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown key '{dotted}'")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown key '{dotted}'")
        node[parts[-1]] = value
        return from_dict(d)


_ALIASES = {"lambda": "lam"}  # YAML spelling -> field name
_CHOICES = {
    "data.source": ("synthetic", "cifar10"),
    "model.arch": ("miniconv", "mlp"),
    "train.optimizer": ("sgd", "adam"),
    "fed.local_optimizer": ("sgd", "adam"),
    "output.formats": ("csv", "json"),
}


def _check_scalar(value, tp, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _check_scalar(value, args[0], path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{path}: unsupported type")  # pragma: no cover


def _build(cls, raw, prefix: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        name = _ALIASES.get(key, key)
        path = f"{prefix}{key}"
        if not isinstance(key, str) or name not in names:
            raise ConfigError(f"unknown key '{path}'")
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, path + ".")
        else:
            kwargs[name] = _check_scalar(value, tp, path)
        allowed = _CHOICES.get(path)
        if allowed is not None:
            vals = kwargs[name] if isinstance(kwargs[name], list) else [kwargs[name]]
            bad = [v for v in vals if v not in allowed]
            if bad:
                raise ConfigError(f"{path}: {bad[0]!r} not one of {list(allowed)}")
    return cls(**kwargs)


def from_dict(raw) -> ExperimentConfig:
    return _build(ExperimentConfig, raw, "")


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        raise ConfigError(f"malformed config{where}: {getattr(e, 'problem', e)}") from None
    return from_dict(raw)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    d["attack"]["lambda"] = d["attack"].pop("lam")
    return yaml.safe_dump(d, sort_keys=True)
