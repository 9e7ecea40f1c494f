"""Run configuration for the command-line tool.

A run config is a JSON object with the sections ``data``, ``model``,
``pretrain``, ``finetune``, ``eval``, ``analysis`` and ``viz``. Missing keys
take the defaults below; unknown keys are an error. The fully resolved
config is written next to every run's outputs so the run can be repeated.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields

from .attack import AttackConfig
from .data import ALL_FAMILIES, MAX_CLASSES, Family
from .models import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration values."""


@dataclass
class DataSection:
    seed: int = 0
    n_classes: int = 10
    n_train: int = 2000
    n_test: int = 500
    size: int = 16
    shift_seed: int = 100


@dataclass
class ModelSection:
    width: int = 16
    stages: int = 3
    blocks: int = 1
    seed: int = 0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5


@dataclass
class PretrainSection:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 0.05
    lr_schedule: str = "cosine"
    lr_decay: float = 0.1
    decay_epoch: int = 10
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = True
    seed: int = 0


@dataclass
class AttackSection:
    epsilon: float = 1.1
    tau: float = 0.2
    steps: int = 6
    mode: str = "multiplicative"
    init: str = "identity"
    repeats_rule: bool = False


@dataclass
class FinetuneSection:
    checkpoint: str | None = None
    split: str = "stage2_end"
    arm: str = "advbn"
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.001
    lr_schedule: str = "step"
    lr_decay: float = 0.1
    decay_epoch: int = 10
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment: bool = True
    seed: int = 0
    attack: AttackSection = field(default_factory=AttackSection)
    epsilon_sweep: list[float] | None = None


@dataclass
class EvalSection:
    checkpoint: str | None = None
    baseline: str | None = None
    branch: str = "main"
    families: list[str] = field(default_factory=lambda: [f.value for f in ALL_FAMILIES])
    severities: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    batch_size: int = 256
    bench_iters: int = 100
    bench_batch: int = 128


@dataclass
class AnalysisSection:
    checkpoint: str | None = None
    pair: str = "clean:style_affine"
    severity: int = 3
    layers: list[str] | None = None
    branch: str = "main"


@dataclass
class VizSection:
    checkpoint: str | None = None
    decoder_epochs: int = 10
    decoder_batch: int = 64
    decoder_lr: float = 2e-3
    epsilons: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.1, 1.5])
    n_images: int = 16
    seed: int = 0


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    viz: VizSection = field(default_factory=VizSection)

    # ------------------------------------------------------------ (de)serialization

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = _build(cls, d, "")
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # ------------------------------------------------------------ derived configs

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            classes=self.data.n_classes, width=m.width, stages=m.stages, blocks=m.blocks,
            seed=m.seed, bn_momentum=m.bn_momentum, bn_eps=m.bn_eps,
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(**asdict(self.finetune.attack))

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(**asdict(self.pretrain))

    def finetune_config(self) -> TrainConfig:
        d = asdict(self.finetune)
        for k in ("checkpoint", "split", "arm", "epsilon_sweep"):
            d.pop(k)
        d["attack"] = self.attack_config()
        return TrainConfig(**d)

    # ------------------------------------------------------------ validation

    def validate(self) -> None:
        try:
            self._validate()
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None

    def _validate(self) -> None:
        d = self.data
        if not 2 <= d.n_classes <= MAX_CLASSES:
            raise ConfigError(f"data.n_classes must be in 2..{MAX_CLASSES}")
        if d.n_train < 1 or d.n_test < 1 or d.size < 8:
            raise ConfigError("data.n_train and data.n_test must be positive and data.size >= 8")
        mc = self.model_config()
        mc.validate()
        if d.size % 2 ** (mc.stages - 1):
            raise ConfigError(f"data.size {d.size} is not divisible by the network stride {2 ** (mc.stages - 1)}")
        self.pretrain_config().validate()
        self.finetune_config().validate()
        if self.finetune.split not in mc.split_names:
            raise ConfigError(f"finetune.split must be one of {mc.split_names}")
        if self.finetune.arm not in ("advbn", "dual_clean", "clean"):
            raise ConfigError(f"unknown finetune.arm {self.finetune.arm!r}")
        if self.finetune.epsilon_sweep is not None and not all(e > 0 for e in self.finetune.epsilon_sweep):
            raise ConfigError("finetune.epsilon_sweep values must be positive")
        for br in (self.eval.branch, self.analysis.branch):
            if br not in ("main", "aux"):
                raise ConfigError(f"branch must be 'main' or 'aux', got {br!r}")
        for fam in self.eval.families:
            Family(fam)
        if not all(1 <= s <= 5 for s in self.eval.severities) or not 1 <= self.analysis.severity <= 5:
            raise ConfigError("severities must lie in 1..5")
        parse_pair(self.analysis.pair)
        if any(e < 0 for e in self.viz.epsilons) or self.viz.n_images < 1:
            raise ConfigError("viz.epsilons must be non-negative and viz.n_images positive")
        if self.eval.bench_iters < 1 or self.eval.bench_batch < 1:
            raise ConfigError("bench sizes must be positive")


def parse_pair(pair: str) -> tuple[str, str]:
    """``"clean:style_affine"`` -> ("clean", "style_affine")."""
    parts = pair.split(":")
    if len(parts) != 2:
        raise ConfigError(f"pair must look like 'a:b', got {pair!r}")
    for p in parts:
        if p != "clean":
            try:
                Family(p)
            except ValueError:
                raise ConfigError(f"unknown dataset {p!r} in pair (use 'clean' or a shift family)") from None
    return parts[0], parts[1]


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kw = {}
    for name, value in d.items():
        tp = hints[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(tp):
            kw[name] = _build(tp, value, path)
        else:
            kw[name] = _coerce(value, tp, path)
    return cls(**kw)


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


# ---------------------------------------------------------------- schema


_JSON_TYPES = {int: "integer", float: "number", str: "string", bool: "boolean"}


def _schema_for(tp) -> dict:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        hints = typing.get_type_hints(tp)
        default = tp()
        props = {}
        for f in fields(tp):
            s = _schema_for(hints[f.name])
            val = getattr(default, f.name)
            s["default"] = asdict(val) if dataclasses.is_dataclass(val) else val
            props[f.name] = s
        return {"type": "object", "additionalProperties": False, "properties": props}
    if origin is list:
        return {"type": "array", "items": _schema_for(args[0])}
    if args and type(None) in args:
        inner = _schema_for([a for a in args if a is not type(None)][0])
        return {"anyOf": [inner, {"type": "null"}]}
    return {"type": _JSON_TYPES[tp]}


def json_schema() -> dict:
    """JSON Schema (draft 2020-12) describing :class:`RunConfig`."""
    s = _schema_for(RunConfig)
    s["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    s["title"] = "advbn run config"
    return s
