"""Autoregressive generation for both tasks on the recurrent path."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch

from uniroute.data.sequence import mmu_prompt, t2i_prompt
from uniroute.data.tokenizer import WordTokenizer
from uniroute.data.toy import detokenize
from uniroute.domain.generation import GenerationConfig
from uniroute.domain.image import ToyImage
from uniroute.domain.stream import TrainingExample
from uniroute.domain.token import Expected, Modality, SpecialTokens, Token
from uniroute.inference.session import prefill
from uniroute.model.network import UniRouteModel


@dataclass(frozen=True)
class TextGeneration:
    """Answer tokens, [EOT] excluded. Under a shared vocabulary any
    non-text token is counted and left out of `text_ids`."""

    tokens: Tuple[Token, ...]
    cross_modal_tokens: int

    @property
    def text_ids(self) -> List[int]:
        return [t.id for t in self.tokens if t.modality is Modality.TEXT]


@dataclass(frozen=True)
class ImageGeneration:
    """Image tokens as emitted and the grid after cross-modal tokens were
    replaced by image code 0."""

    tokens: Tuple[Token, ...]
    cross_modal_tokens: int

    @property
    def image_tokens(self) -> List[Token]:
        return [
            t if t.modality is Modality.IMAGE else Token.image(0)
            for t in self.tokens
        ]

    def image(self) -> ToyImage:
        return detokenize(self.image_tokens)


@torch.no_grad()
def decode_text(
    model: UniRouteModel,
    prompt: TrainingExample,
    config: Optional[GenerationConfig] = None,
) -> TextGeneration:
    session = prefill(model, prompt, config)
    emitted: List[Token] = []
    cross_modal = 0
    for _ in range(session.config.max_new_tokens):
        token = model.vocab.decode_constrained(
            session.hidden,
            Expected.TEXT_OR_EOT,
            session.config,
            session.generator,
        )
        if token == SpecialTokens.EOT:
            break
        if token.modality is not Modality.TEXT:
            cross_modal += 1
        emitted.append(token)
        session.feed(token)
    return TextGeneration(tuple(emitted), cross_modal)


@torch.no_grad()
def decode_image(
    model: UniRouteModel,
    prompt: TrainingExample,
    config: Optional[GenerationConfig] = None,
) -> ImageGeneration:
    """Emit exactly max_image_tokens tokens, [EOI] masked until then, and
    close the segment with a forced [EOI]."""
    session = prefill(model, prompt, config)
    emitted: List[Token] = []
    cross_modal = 0
    for _ in range(model.config.max_image_tokens):
        token = model.vocab.decode_constrained(
            session.hidden,
            Expected.IMAGE_OR_EOI,
            session.config,
            session.generator,
            allow_terminal=False,
        )
        if token.modality is not Modality.IMAGE:
            cross_modal += 1
        emitted.append(token)
        session.feed(token)
    session.feed(SpecialTokens.EOI)
    return ImageGeneration(tuple(emitted), cross_modal)


def generate_text(
    model: UniRouteModel,
    tokenizer: WordTokenizer,
    image: ToyImage,
    question: str,
    config: Optional[GenerationConfig] = None,
) -> str:
    question_tokens = [Token.text(i) for i in tokenizer.encode(question)]
    prompt = mmu_prompt(model.encode_image(image), question_tokens)
    generated = decode_text(model, prompt, config)
    return tokenizer.decode(generated.text_ids, strict=False)


def generate_image(
    model: UniRouteModel,
    tokenizer: WordTokenizer,
    caption: str,
    config: Optional[GenerationConfig] = None,
) -> ToyImage:
    caption_tokens = [Token.text(i) for i in tokenizer.encode(caption)]
    return decode_image(model, t2i_prompt(caption_tokens), config).image()
