from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from uniroute.domain.exception import InvalidConfigError
from uniroute.domain.value_object import ValueObject


class DecodeMode(Enum):
    GREEDY = "greedy"
    SAMPLED = "sampled"


@dataclass(frozen=True)
class GenerationConfig(ValueObject):
    """Sampling settings; greedy decoding ignores temperature and top_k."""

    mode: DecodeMode = DecodeMode.GREEDY
    temperature: float = 1.0
    top_k: int = 8
    max_new_tokens: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.temperature <= 0:
            raise InvalidConfigError("temperature must be positive")
        if self.top_k <= 0:
            raise InvalidConfigError("top_k must be positive")
        if self.max_new_tokens <= 0:
            raise InvalidConfigError("max_new_tokens must be positive")

    @property
    def is_greedy(self) -> bool:
        return self.mode is DecodeMode.GREEDY
