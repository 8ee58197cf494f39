"""Run configuration: nested dataclasses parsed strictly from JSON."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .grpo import GrpoConfig
from .model import ModelConfig
from .sampler import SamplerConfig
from .sft import SftConfig
from .tokenizer import TOY_SCHEDULE, ScaleSchedule


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    sides: Tuple[int, ...] = TOY_SCHEDULE


@dataclass
class TokenizerSection:
    dim: int = 16
    vocab: int = 64
    seed: int = 0
    fit_images: int = 300
    kmeans_iters: int = 40


@dataclass
class ModelSection:
    embed_dim: int = 128
    num_heads: int = 4
    num_layers: int = 4
    blend_alpha: Optional[Tuple[float, ...]] = None
    alpha_start: float = 0.2
    alpha_end: float = 0.8
    mlp_ratio: int = 4
    encoder_channels: Tuple[int, int] = (16, 32)
    adapter_rank: int = 8
    adapter_scaling: float = 2.0
    adapt_head: bool = True
    init_std: float = 0.02
    seed: int = 0


@dataclass
class RewardSection:
    scale: float = 5.0
    net_seed: int = 1234


@dataclass
class DataSection:
    n: int = 1000
    seed: int = 0
    image_size: int = 16
    root: str = "data"


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    model: ModelSection = field(default_factory=ModelSection)
    sft: SftConfig = field(default_factory=SftConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    reward: RewardSection = field(default_factory=RewardSection)
    data: DataSection = field(default_factory=DataSection)
    deterministic: bool = False
    seed: int = 0

    def scale_schedule(self) -> ScaleSchedule:
        return ScaleSchedule(tuple(self.schedule.sides))

    def model_config(self) -> ModelConfig:
        return ModelConfig(schedule=tuple(self.schedule.sides), vocab_size=self.tokenizer.vocab,
                           feature_dim=self.tokenizer.dim, image_size=self.data.image_size,
                           **dataclasses.asdict(self.model))

    def to_dict(self) -> Dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        return _build(cls, d, "config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return _build(tp, value, where)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if origin is tuple and len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if origin is tuple and args:
            if len(args) != len(value):
                raise ConfigError(f"{where}: expected {len(args)} entries")
            return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
        return type(value)(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    return value


def _build(cls, d: Dict[str, Any], where: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in d.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def describe_defaults() -> str:
    """One line per config key with its default, for ``--help``."""
    lines = []

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                walk(v, f"{prefix}{f.name}.")
            else:
                lines.append(f"  {prefix}{f.name} = {json.dumps(_plain(v))}")

    walk(RunConfig(), "")
    return "\n".join(lines)
