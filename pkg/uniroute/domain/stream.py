from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import torch

from uniroute.domain.exception import UniRouteError
from uniroute.domain.task import TaskRoute
from uniroute.domain.token import Modality, Token
from uniroute.domain.value_object import ValueObject


class SegmentKind(Enum):
    TASK_TAG = "task_tag"
    IMAGE_SEG = "image_seg"
    TEXT_SEG = "text_seg"


@dataclass(frozen=True)
class Segment(ValueObject):
    kind: SegmentKind
    start: int
    end: int

    def validate(self) -> None:
        if not 0 <= self.start < self.end:
            raise LayoutError(f"bad segment bounds [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class TokenStream(ValueObject):
    """Modality-tagged tokens, their segment layout and the loss mask.

    `loss_mask[t]` is True when token t is a supervised prediction target,
    i.e. the model is scored on predicting it from tokens 0..t-1.
    """

    tokens: Tuple[Token, ...]
    segments: Tuple[Segment, ...]
    loss_mask: Tuple[bool, ...]

    def validate(self) -> None:
        if len(self.loss_mask) != len(self.tokens):
            raise LayoutError("loss mask and tokens differ in length")
        cursor = 0
        for segment in self.segments:
            if segment.start != cursor:
                raise LayoutError(
                    f"segment {segment.kind.value} starts at {segment.start}, "
                    f"expected {cursor}"
                )
            cursor = segment.end
        if cursor != len(self.tokens):
            raise LayoutError("segments don't cover the stream")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def supervised_count(self) -> int:
        return sum(self.loss_mask)


@dataclass(frozen=True, eq=False)
class TrainingExample:
    """One task example.

    MMU examples carry the frozen encoder features (n, d_vis) occupying the
    image segment; they are projected into d_model inside the model so the
    projector receives gradients.
    """

    route: TaskRoute
    stream: TokenStream
    visual_features: Optional[torch.Tensor] = None

    def __post_init__(self) -> None:
        features = sum(
            1 for t in self.stream.tokens if t.modality is Modality.FEATURE
        )
        if self.route is TaskRoute.MMU:
            if self.visual_features is None:
                raise LayoutError("MMU example without visual features")
            if features != self.visual_features.shape[0]:
                raise LayoutError(
                    f"{features} feature slots for "
                    f"{self.visual_features.shape[0]} feature vectors"
                )
        elif features:
            raise LayoutError(
                f"{self.route.value} example can't hold feature slots"
            )


class LayoutError(UniRouteError):
    def __init__(self, message: str) -> None:
        super().__init__(message, "LAYOUT_ERROR")
