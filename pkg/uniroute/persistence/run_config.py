"""Run configuration: a TOML document flattened into dotted keys.

Every key has a default, so an empty document (or no file at all) gives
the desk-scale setup. Unknown keys are rejected.

>>> config = RunConfig.from_dict({"model": {"d_model": 64}})
>>> config["model.d_model"]
64
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional

import toml

from uniroute.domain.exception import InvalidConfigError, UniRouteError
from uniroute.domain.generation import DecodeMode, GenerationConfig
from uniroute.domain.model_config import ModelConfig
from uniroute.domain.schedule import (
    DEFAULT_SCHEDULES,
    OptimizerConfig,
    StageConfig,
)
from uniroute.domain.task import Stage

STAGE_SECTIONS = {
    Stage.LM: "train.stage0_lm",
    Stage.MMU: "train.stage1_mmu",
    Stage.T2I: "train.stage1_t2i",
    Stage.UNIFIED: "train.stage2",
}
NO_OVERRIDE = -1


def _defaults() -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name != "shared_vocab":
            values[f"model.{f.name}"] = f.default
    for stage, section in STAGE_SECTIONS.items():
        for key, value in DEFAULT_SCHEDULES[stage].items():
            values[f"{section}.{key}"] = value
    for f in dataclasses.fields(OptimizerConfig):
        values[f"train.{f.name}"] = f.default
    values["train.prompt_loss"] = False
    for f in dataclasses.fields(GenerationConfig):
        default = f.default
        values[f"gen.{f.name}"] = (
            default.value if isinstance(default, DecodeMode) else default
        )
    values["data.mmu_question"] = "describe the image"
    values["ablation.shared_vocab"] = False
    values["ablation.lora_rank_override"] = NO_OVERRIDE
    return values


DEFAULTS = _defaults()


def flatten(document: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in document.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidConfigError(f"{key} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfigError(f"{key} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise InvalidConfigError(f"{key} must be a string")
    return value


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any] = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> RunConfig:
        values = dict(DEFAULTS)
        for key, value in flatten(document).items():
            if key not in DEFAULTS:
                raise UnknownConfigKeyError(key)
            values[key] = _coerce(key, value)
        return cls(values)

    @classmethod
    def load(cls, path: Optional[str] = None) -> RunConfig:
        if path is None:
            return cls()
        if not os.path.isfile(path):
            raise InvalidConfigError(f"no configuration file at {path}")
        try:
            document = toml.load(path)
        except toml.TomlDecodeError as error:
            raise InvalidConfigError(f"{path}: {error}") from error
        return cls.from_dict(document)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, prefix: str) -> Dict[str, Any]:
        start = prefix + "."
        return {
            key[len(start):]: value
            for key, value in self.values.items()
            if key.startswith(start) and "." not in key[len(start):]
        }

    def model_config(self) -> ModelConfig:
        model = ModelConfig.create(
            **self.section("model"),
            shared_vocab=self["ablation.shared_vocab"],
        )
        override = self["ablation.lora_rank_override"]
        if override != NO_OVERRIDE:
            if override < 0:
                raise InvalidConfigError(
                    "ablation.lora_rank_override must be -1 or >= 0"
                )
            model = model.with_lora_rank(override)
        return model

    def stage_config(self, stage: Stage) -> StageConfig:
        return StageConfig.create(
            stage=stage, **self.section(STAGE_SECTIONS[stage])
        )

    def optimizer_config(self) -> OptimizerConfig:
        names = {f.name for f in dataclasses.fields(OptimizerConfig)}
        values = self.section("train")
        return OptimizerConfig.create(
            **{k: v for k, v in values.items() if k in names}
        )

    def generation_config(self) -> GenerationConfig:
        values = self.section("gen")
        try:
            mode = DecodeMode(values.pop("mode"))
        except ValueError as error:
            raise InvalidConfigError(f"gen.mode: {error}") from error
        return GenerationConfig.create(mode=mode, **values)

    @property
    def prompt_loss(self) -> bool:
        return self["train.prompt_loss"]

    @property
    def question(self) -> str:
        return self["data.mmu_question"]

    def to_dict(self) -> Dict[str, Any]:
        return dict(sorted(self.values.items()))


class UnknownConfigKeyError(UniRouteError):
    def __init__(self, key: str) -> None:
        super().__init__(
            f"unknown configuration key {key!r}", "UNKNOWN_CONFIG_KEY"
        )
        self.key = key
