"""Run configuration: one YAML file with world, data, model, train and eval sections.

Every section maps onto a dataclass; unknown keys and wrongly typed values are
rejected with the dotted path of the offending entry.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .model import ModelConfig
from .simworld import ConfigError, ScenarioConfig
from .train import STAGES, TrainConfig


@dataclass
class DataConfig:
    n_scenarios: int = 20


@dataclass
class EvalConfig:
    n_points: int = 40
    match_threshold_m: float = 2.0

    def validate(self) -> EvalConfig:
        if self.n_points < 2:
            raise ConfigError("n_points must be >= 2")
        if self.match_threshold_m <= 0:
            raise ConfigError("match_threshold_m must be positive")
        return self


@dataclass
class RunConfig:
    world: ScenarioConfig = field(default_factory=ScenarioConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict = field(default_factory=dict)                 # fields shared by every stage
    stages: dict = field(default_factory=dict)                # stage -> per-stage overrides
    eval: EvalConfig = field(default_factory=EvalConfig)

    def train_config(self, stage: str, seed: int) -> TrainConfig:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
        merged = {**self.train, **self.stages.get(stage, {}), "stage": stage, "seed": seed}
        return _build(TrainConfig, merged, f"train.stages.{stage}")

    def to_dict(self) -> dict:
        out = {
            "world": dataclasses.asdict(self.world),
            "data": dataclasses.asdict(self.data),
            "model": dataclasses.asdict(self.model),
            "train": dict(self.train),
            "eval": dataclasses.asdict(self.eval),
        }
        out["train"]["stages"] = {k: dict(v) for k, v in self.stages.items()}
        return out


SECTIONS = ("world", "data", "model", "train", "eval")
_TRAIN_SHARED = {f.name for f in dataclasses.fields(TrainConfig)} - {"stage", "seed"}


def _check_value(value: Any, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_value(value, inner[0], path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
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
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{path}: expected a list of {len(args)} values, got {value!r}")
        return tuple(_check_value(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        return {str(k): _check_value(v, args[1], f"{path}.{k}") for k, v in value.items()}
    return value


def _build(cls, raw: Optional[dict], path: str):
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping, got {raw!r}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(map(str, unknown))}")
    kwargs = {k: _check_value(v, hints[k], f"{path}.{k}") for k, v in raw.items()}
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except (ConfigError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None
    return obj


def parse_config(raw: Optional[dict]) -> RunConfig:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"config: unknown section(s) {', '.join(map(str, unknown))}")
    train = dict(raw.get("train") or {})
    stages = train.pop("stages", None) or {}
    bad = sorted(set(train) - _TRAIN_SHARED)
    if bad:
        raise ConfigError(f"train: unknown key(s) {', '.join(bad)}")
    if not isinstance(stages, dict) or set(stages) - set(STAGES):
        raise ConfigError(f"train.stages: keys must be among {STAGES}")
    for name, over in stages.items():
        if not isinstance(over, dict) or set(over) & {"stage", "seed"} or set(over) - _TRAIN_SHARED:
            raise ConfigError(f"train.stages.{name}: overrides must be train fields other than stage/seed")
    cfg = RunConfig(
        world=_build(ScenarioConfig, raw.get("world"), "world"),
        data=_build(DataConfig, raw.get("data"), "data"),
        model=_build(ModelConfig, raw.get("model"), "model"),
        train=train,
        stages={k: dict(v) for k, v in stages.items()},
        eval=_build(EvalConfig, raw.get("eval"), "eval"),
    )
    if cfg.data.n_scenarios < 1:
        raise ConfigError("data.n_scenarios: must be >= 1")
    for stage in STAGES:
        cfg.train_config(stage, 0)  # surfaces bad train values at load time
    return cfg


def load_config(path: Optional[str | Path]) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    return parse_config(raw)
