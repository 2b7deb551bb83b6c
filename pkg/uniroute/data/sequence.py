"""Token stream layouts of the two tasks, their loss masks and batching.

    MMU  [MMU][SOI] features [EOI][SOT] question answer [EOT]
    T2I  [T2I][SOT] caption [EOT][SOI] image tokens [EOI]
    LM   [SOT] caption [EOT]

The builders construct streams; `parse_layout` re-derives the segment
structure from tokens alone and is used to validate prompts.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import torch
from torch import Tensor

from uniroute.domain.stream import (
    LayoutError,
    Segment,
    SegmentKind,
    TokenStream,
    TrainingExample,
)
from uniroute.domain.task import TaskRoute
from uniroute.domain.token import (
    Modality,
    SpecialTokens,
    Token,
    modality_code,
)

IGNORE = -1


class _StreamWriter:
    def __init__(self) -> None:
        self.tokens: List[Token] = []
        self.mask: List[bool] = []
        self.segments: List[Segment] = []
        self._start = 0

    def add(self, tokens: Sequence[Token], supervised: bool = False) -> None:
        self.tokens.extend(tokens)
        self.mask.extend([supervised] * len(tokens))

    def close(self, kind: SegmentKind) -> None:
        end = len(self.tokens)
        if end > self._start:
            self.segments.append(
                Segment.create(kind=kind, start=self._start, end=end)
            )
        self._start = end

    def stream(self) -> TokenStream:
        return TokenStream.create(
            tokens=tuple(self.tokens),
            segments=tuple(self.segments),
            loss_mask=tuple(self.mask),
        )


def _check_text(tokens: Sequence[Token], what: str) -> None:
    for token in tokens:
        if token.modality is not Modality.TEXT:
            raise LayoutError(f"{what} holds non-text token {token!r}")


def build_mmu_sequence(
    visual_features: Tensor,
    question_tokens: Sequence[Token],
    answer_tokens: Sequence[Token],
    supervise_prompt: bool = False,
) -> TrainingExample:
    """Supervise the answer and its [EOT]; with `supervise_prompt` the
    question is supervised too."""
    if visual_features.ndim != 2 or visual_features.shape[0] == 0:
        raise LayoutError("MMU example needs at least one visual feature")
    if not answer_tokens:
        raise LayoutError("MMU example needs a nonempty answer")
    _check_text(question_tokens, "question")
    _check_text(answer_tokens, "answer")

    writer = _StreamWriter()
    writer.add([SpecialTokens.MMU])
    writer.close(SegmentKind.TASK_TAG)
    writer.add([SpecialTokens.SOI])
    writer.add([Token.feature(i) for i in range(visual_features.shape[0])])
    writer.add([SpecialTokens.EOI])
    writer.close(SegmentKind.IMAGE_SEG)
    writer.add([SpecialTokens.SOT])
    writer.add(question_tokens, supervised=supervise_prompt)
    writer.add(answer_tokens, supervised=True)
    writer.add([SpecialTokens.EOT], supervised=True)
    writer.close(SegmentKind.TEXT_SEG)
    return TrainingExample(TaskRoute.MMU, writer.stream(), visual_features)


def build_t2i_sequence(
    caption_tokens: Sequence[Token],
    image_tokens: Sequence[Token],
    max_image_tokens: int = 16,
    supervise_prompt: bool = False,
) -> TrainingExample:
    """Supervise the image tokens and [EOI]; with `supervise_prompt` the
    caption and its [EOT] are supervised too."""
    if not caption_tokens:
        raise LayoutError("T2I example needs a caption")
    if len(image_tokens) != max_image_tokens:
        raise LayoutError(
            f"T2I example has {len(image_tokens)} image tokens, "
            f"expected {max_image_tokens}"
        )
    _check_text(caption_tokens, "caption")
    for token in image_tokens:
        if token.modality is not Modality.IMAGE:
            raise LayoutError(f"image segment holds {token!r}")

    writer = _StreamWriter()
    writer.add([SpecialTokens.T2I])
    writer.close(SegmentKind.TASK_TAG)
    writer.add([SpecialTokens.SOT])
    writer.add(caption_tokens, supervised=supervise_prompt)
    writer.add([SpecialTokens.EOT], supervised=supervise_prompt)
    writer.close(SegmentKind.TEXT_SEG)
    writer.add([SpecialTokens.SOI])
    writer.add(image_tokens, supervised=True)
    writer.add([SpecialTokens.EOI], supervised=True)
    writer.close(SegmentKind.IMAGE_SEG)
    return TrainingExample(TaskRoute.T2I, writer.stream())


def build_lm_sequence(text_tokens: Sequence[Token]) -> TrainingExample:
    """Plain text stream for base language-model pretraining."""
    if not text_tokens:
        raise LayoutError("text example needs at least one token")
    _check_text(text_tokens, "text")
    writer = _StreamWriter()
    writer.add([SpecialTokens.SOT])
    writer.add(text_tokens, supervised=True)
    writer.add([SpecialTokens.EOT], supervised=True)
    writer.close(SegmentKind.TEXT_SEG)
    return TrainingExample(TaskRoute.NONE, writer.stream())


def mmu_prompt(
    visual_features: Tensor, question_tokens: Sequence[Token]
) -> TrainingExample:
    """MMU prefix ending right after the question, ready for decoding."""
    _check_text(question_tokens, "question")
    writer = _StreamWriter()
    writer.add([SpecialTokens.MMU])
    writer.close(SegmentKind.TASK_TAG)
    writer.add([SpecialTokens.SOI])
    writer.add([Token.feature(i) for i in range(visual_features.shape[0])])
    writer.add([SpecialTokens.EOI])
    writer.close(SegmentKind.IMAGE_SEG)
    writer.add([SpecialTokens.SOT])
    writer.add(question_tokens)
    writer.close(SegmentKind.TEXT_SEG)
    return TrainingExample(TaskRoute.MMU, writer.stream(), visual_features)


def t2i_prompt(caption_tokens: Sequence[Token]) -> TrainingExample:
    """T2I prefix ending with the opening [SOI]."""
    if not caption_tokens:
        raise LayoutError("T2I prompt needs a caption")
    _check_text(caption_tokens, "caption")
    writer = _StreamWriter()
    writer.add([SpecialTokens.T2I])
    writer.close(SegmentKind.TASK_TAG)
    writer.add([SpecialTokens.SOT])
    writer.add(caption_tokens)
    writer.add([SpecialTokens.EOT])
    writer.close(SegmentKind.TEXT_SEG)
    writer.add([SpecialTokens.SOI])
    writer.close(SegmentKind.IMAGE_SEG)
    return TrainingExample(TaskRoute.T2I, writer.stream())


def next_token_targets(
    stream: TokenStream,
) -> Tuple[Tuple[Token, ...], Tuple[Token, ...], Tuple[bool, ...]]:
    """Inputs are tokens[:-1], targets tokens[1:]; the mask follows the
    targets."""
    if len(stream) < 2:
        raise LayoutError(
            f"stream of length {len(stream)} has no next-token target"
        )
    return stream.tokens[:-1], stream.tokens[1:], stream.loss_mask[1:]


_IMAGE_FEATURES = (
    SegmentKind.IMAGE_SEG,
    SpecialTokens.SOI,
    Modality.FEATURE,
    SpecialTokens.EOI,
)
_IMAGE_CODES = (
    SegmentKind.IMAGE_SEG,
    SpecialTokens.SOI,
    Modality.IMAGE,
    SpecialTokens.EOI,
)
_TEXT = (
    SegmentKind.TEXT_SEG,
    SpecialTokens.SOT,
    Modality.TEXT,
    SpecialTokens.EOT,
)

# Layout grammar, one entry per segment: (kind, opening, body modality,
# closing). The task tag has no body.
_GRAMMARS = {
    TaskRoute.MMU: (
        (SegmentKind.TASK_TAG, SpecialTokens.MMU, None, None),
        _IMAGE_FEATURES,
        _TEXT,
    ),
    TaskRoute.T2I: (
        (SegmentKind.TASK_TAG, SpecialTokens.T2I, None, None),
        _TEXT,
        _IMAGE_CODES,
    ),
    TaskRoute.NONE: (_TEXT,),
}


@dataclass(frozen=True)
class ParsedLayout:
    route: TaskRoute
    segments: Tuple[Segment, ...]
    complete: bool

    @property
    def open_segment(self) -> Optional[Segment]:
        """The segment still accepting tokens, if the stream stops inside
        one."""
        if self.complete or not self.segments:
            return None
        return self.segments[-1]


def route_of(tokens: Sequence[Token]) -> TaskRoute:
    if not tokens:
        raise LayoutError("empty stream")
    first = tokens[0]
    for route, grammar in _GRAMMARS.items():
        if first == grammar[0][1]:
            return route
    raise LayoutError(f"stream starts with {first!r}, not a task tag or [SOT]")


def parse_layout(
    tokens: Sequence[Token], prefix: bool = False
) -> ParsedLayout:
    """Recover the segments of a stream from its tokens.

    With `prefix=True` the stream may stop anywhere inside the layout.
    """
    route = route_of(tokens)
    segments: List[Segment] = []
    cursor = 0
    for kind, opening, body, closing in _GRAMMARS[route]:
        if cursor == len(tokens):
            if prefix:
                return ParsedLayout(route, tuple(segments), False)
            raise LayoutError(f"stream ends before its {kind.value}")
        start = cursor
        if tokens[cursor] != opening:
            raise LayoutError(
                f"position {cursor}: expected {opening!r}, got "
                f"{tokens[cursor]!r}"
            )
        cursor += 1
        if body is not None:
            while cursor < len(tokens) and tokens[cursor].modality is body:
                cursor += 1
            if cursor == len(tokens):
                if prefix:
                    segments.append(
                        Segment.create(kind=kind, start=start, end=cursor)
                    )
                    return ParsedLayout(route, tuple(segments), False)
                raise LayoutError(f"{kind.value} isn't closed")
            if tokens[cursor] != closing:
                raise LayoutError(
                    f"position {cursor}: {tokens[cursor]!r} inside "
                    f"{kind.value}"
                )
            cursor += 1
        segments.append(Segment.create(kind=kind, start=start, end=cursor))
    if cursor != len(tokens):
        raise LayoutError(f"trailing tokens from position {cursor}")
    return ParsedLayout(route, tuple(segments), True)


@dataclass(frozen=True, eq=False)
class Batch:
    """Right-padded next-token batch of one route.

    Kinds are modality codes, IGNORE on padding. `features` holds the raw
    visual feature of every FEATURE input position (zeros elsewhere).
    """

    route: TaskRoute
    input_kinds: Tensor
    input_ids: Tensor
    target_kinds: Tensor
    target_ids: Tensor
    target_mask: Tensor
    features: Optional[Tensor] = None

    def __len__(self) -> int:
        return int(self.input_kinds.shape[0])

    @property
    def supervised_count(self) -> int:
        return int(self.target_mask.sum().item())


def _encode_tokens(
    tokens: Sequence[Token], length: int
) -> Tuple[Tensor, Tensor]:
    kinds = torch.full((length,), IGNORE, dtype=torch.long)
    ids = torch.zeros(length, dtype=torch.long)
    for t, token in enumerate(tokens):
        kinds[t] = modality_code(token.modality)
        ids[t] = token.id
    return kinds, ids


def collate(examples: Sequence[TrainingExample]) -> Batch:
    if not examples:
        raise LayoutError("can't batch zero examples")
    route = examples[0].route
    if any(e.route is not route for e in examples):
        raise LayoutError("a batch holds a single route")
    shifted = [next_token_targets(e.stream) for e in examples]
    length = max(len(inputs) for inputs, _, _ in shifted)

    rows = []
    for inputs, targets, mask in shifted:
        input_kinds, input_ids = _encode_tokens(inputs, length)
        target_kinds, target_ids = _encode_tokens(targets, length)
        target_mask = torch.zeros(length, dtype=torch.bool)
        target_mask[: len(mask)] = torch.tensor(mask, dtype=torch.bool)
        rows.append(
            (input_kinds, input_ids, target_kinds, target_ids, target_mask)
        )
    columns = [torch.stack(column) for column in zip(*rows)]

    features = None
    if route is TaskRoute.MMU:
        features = _place_features(examples, columns[0], columns[1], length)
    return Batch(route, *columns, features=features)


def _place_features(
    examples: Sequence[TrainingExample],
    kinds: Tensor,
    ids: Tensor,
    length: int,
) -> Tensor:
    first = examples[0].visual_features
    if first is None:
        raise LayoutError("MMU example 0 has no visual features")
    d_vis, dtype = first.shape[-1], first.dtype
    features = torch.zeros(len(examples), length, d_vis, dtype=dtype)
    slots = kinds == modality_code(Modality.FEATURE)
    for row, example in enumerate(examples):
        selected = slots[row]
        visual = example.visual_features
        if visual is None:
            raise LayoutError(f"MMU example {row} has no visual features")
        features[row, selected] = visual[ids[row, selected]]
    return features


def iter_supervised(
    examples: Sequence[TrainingExample],
) -> Iterator[Tuple[int, Token]]:
    """(example index, target token) for every supervised target."""
    for index, example in enumerate(examples):
        _, targets, mask = next_token_targets(example.stream)
        for token, supervised in zip(targets, mask):
            if supervised:
                yield index, token
