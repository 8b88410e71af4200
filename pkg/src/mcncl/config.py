"""Run configuration: nested YAML with every key defaulted and unknown keys rejected.

Defaults for hyperparameters the method leaves open (heads, layers, widths,
temperature, loss weights, optimiser settings) are local choices.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from mcncl.data import CorpusSpec, spec_to_dict
from mcncl.mcn import DEFAULT_STREAM_ORDER


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PsaSection:
    num_branches: int = 4
    se_reduction: int = 4
    pooling: str = "mean"


@dataclass(frozen=True)
class McnSection:
    num_heads: int = 4
    num_layers: int = 2
    ffn_dim: Optional[int] = None
    stream_order: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_STREAM_ORDER.items()})


@dataclass(frozen=True)
class ContrastiveSection:
    temperature: float = 0.07
    hard_fraction: float = 0.3
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    proj_dim: Optional[int] = None


@dataclass(frozen=True)
class ClassifierSection:
    hidden: int = 256
    hidden2: int = 128


@dataclass(frozen=True)
class ModelSection:
    dim: int = 256
    psa: PsaSection = field(default_factory=PsaSection)
    mcn: McnSection = field(default_factory=McnSection)
    contrastive: ContrastiveSection = field(default_factory=ContrastiveSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    no_psa: bool = False
    no_mcn_cl: bool = False


@dataclass(frozen=True)
class OptimSection:
    kind: str = "adam"
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class DataSection:
    corpus_path: Optional[str] = None
    corpus: CorpusSpec = field(default_factory=CorpusSpec)


@dataclass(frozen=True)
class GradcheckSection:
    dim: int = 8
    num_heads: int = 2
    num_layers: int = 1
    num_branches: int = 4
    frames: int = 6
    utterances: int = 8
    num_classes: int = 3
    raw_dim: int = 5
    classifier_hidden: int = 16
    classifier_hidden2: int = 8
    lambdas: tuple = (0.0, 0.5, 1.0)
    step: float = 1e-6
    tolerance: float = 1e-4


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    lambda_contrast: float = 1.0
    out_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def __post_init__(self):
        if self.lambda_contrast < 0:
            raise ConfigError("lambda_contrast must be >= 0")
        if self.optim.kind not in ("adam", "sgd"):
            raise ConfigError(f"optim.kind must be 'adam' or 'sgd', got {self.optim.kind!r}")
        if self.optim.lr <= 0 or self.optim.batch_size < 1 or self.optim.epochs < 0:
            raise ConfigError("optim.lr, batch_size must be positive and epochs >= 0")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_ablation(self, no_psa: Optional[bool] = None, no_mcn_cl: Optional[bool] = None) -> "RunConfig":
        m = self.model
        m = dataclasses.replace(
            m,
            no_psa=m.no_psa if no_psa is None else no_psa,
            no_mcn_cl=m.no_mcn_cl if no_mcn_cl is None else no_mcn_cl,
        )
        return dataclasses.replace(self, model=m)


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
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
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        return dict(value)
    return value


def from_dict(cls, data, path: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((path + '.' if path else '') + k for k in unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def to_dict(obj) -> dict:
    if isinstance(obj, CorpusSpec):
        return spec_to_dict(obj)
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, dict):
            v = {k: list(x) if isinstance(x, tuple) else x for k, x in v.items()}
        out[f.name] = v
    return out


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return from_dict(RunConfig, raw)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=False)
