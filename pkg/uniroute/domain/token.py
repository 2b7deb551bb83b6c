from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict

from uniroute.domain.exception import UniRouteError
from uniroute.domain.value_object import ValueObject


class Modality(Enum):
    TEXT = "text"
    IMAGE = "image"
    SPECIAL = "special"
    # Placeholder for a continuous visual feature; id is the feature index.
    FEATURE = "feature"


class Expected(Enum):
    TEXT_OR_EOT = "text_or_eot"
    IMAGE_OR_EOI = "image_or_eoi"


@dataclass(frozen=True)
class Token(ValueObject):
    modality: Modality
    id: int  # noqa

    def validate(self) -> None:
        if self.id < 0:
            raise TokenRangeError(f"{self.modality.value} id {self.id} < 0")

    @classmethod
    def text(cls, id: int) -> Token:  # noqa
        return cls.create(modality=Modality.TEXT, id=id)

    @classmethod
    def image(cls, id: int) -> Token:  # noqa
        return cls.create(modality=Modality.IMAGE, id=id)

    @classmethod
    def feature(cls, index: int) -> Token:
        return cls.create(modality=Modality.FEATURE, id=index)

    def __repr__(self) -> str:
        if self.modality is Modality.SPECIAL:
            return SpecialTokens.name_of(self.id)
        return f"{self.modality.value}:{self.id}"


class SpecialTokens:
    """Ids of the six delimiters inside the SPECIAL table."""

    MMU = Token(Modality.SPECIAL, 0)
    T2I = Token(Modality.SPECIAL, 1)
    SOT = Token(Modality.SPECIAL, 2)
    EOT = Token(Modality.SPECIAL, 3)
    SOI = Token(Modality.SPECIAL, 4)
    EOI = Token(Modality.SPECIAL, 5)

    _NAMES: Dict[int, str] = {
        0: "[MMU]",
        1: "[T2I]",
        2: "[SOT]",
        3: "[EOT]",
        4: "[SOI]",
        5: "[EOI]",
    }

    @classmethod
    def name_of(cls, id: int) -> str:  # noqa
        return cls._NAMES.get(id, f"special:{id}")

    @classmethod
    def all(cls) -> tuple:
        return (cls.MMU, cls.T2I, cls.SOT, cls.EOT, cls.SOI, cls.EOI)


class TokenRangeError(UniRouteError):
    def __init__(self, message: str) -> None:
        super().__init__(message, "TOKEN_OUT_OF_RANGE")


_MODALITY_CODES = {
    Modality.TEXT: 0,
    Modality.IMAGE: 1,
    Modality.SPECIAL: 2,
    Modality.FEATURE: 3,
}


def modality_code(modality: Modality) -> int:
    """Integer tag used in batched tensors."""
    return _MODALITY_CODES[modality]
