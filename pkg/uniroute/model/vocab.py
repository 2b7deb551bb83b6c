"""Decoupled text/image vocabularies and modality-constrained decoding.

Text head rows are the text table plus [EOT]; image head rows are the image
table plus [EOI]. With `shared_vocab` a single fused table and head cover
[text | image | specials] and decoding is unconstrained.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from uniroute.domain.exception import UniRouteError
from uniroute.domain.generation import GenerationConfig
from uniroute.domain.model_config import ModelConfig
from uniroute.domain.token import (
    Expected,
    Modality,
    SpecialTokens,
    Token,
    TokenRangeError,
    modality_code,
)

TEXT = modality_code(Modality.TEXT)
IMAGE = modality_code(Modality.IMAGE)
SPECIAL = modality_code(Modality.SPECIAL)


@dataclass(frozen=True)
class HeadLogits:
    """Logits of the supervised positions, grouped by the head scoring them.

    Each entry is (head name, logits (n, V), target indices (n,)).
    """

    heads: Tuple[Tuple[str, Tensor, Tensor], ...]

    @property
    def supervised_count(self) -> int:
        return sum(int(targets.numel()) for _, _, targets in self.heads)

    def for_head(self, name: str) -> Optional[Tuple[Tensor, Tensor]]:
        for head, logits, targets in self.heads:
            if head == name:
                return logits, targets
        return None


class VocabHeads(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        d = config.d_model
        if config.shared_vocab:
            self.fused_embed = nn.Embedding(config.fused_vocab_size, d)
            self.fused_head = nn.Linear(d, config.fused_vocab_size, bias=False)
        else:
            self.text_embed = nn.Embedding(config.text_vocab_size, d)
            self.image_embed = nn.Embedding(config.image_vocab_size, d)
            self.special_embed = nn.Embedding(config.special_token_count, d)
            self.text_head = nn.Linear(d, config.text_outputs, bias=False)
            self.image_head = nn.Linear(d, config.image_outputs, bias=False)

    @property
    def shared(self) -> bool:
        return self.config.shared_vocab

    def _table_size(self, modality: Modality) -> int:
        sizes = {
            Modality.TEXT: self.config.text_vocab_size,
            Modality.IMAGE: self.config.image_vocab_size,
            Modality.SPECIAL: self.config.special_token_count,
        }
        if modality not in sizes:
            raise TokenRangeError(f"{modality.value} tokens have no table")
        return sizes[modality]

    def fused_offset(self, modality: Modality) -> int:
        return {
            Modality.TEXT: 0,
            Modality.IMAGE: self.config.text_vocab_size,
            Modality.SPECIAL: self.config.text_vocab_size
            + self.config.image_vocab_size,
        }[modality]

    def _tables(self) -> Iterator[Tuple[int, nn.Embedding, int]]:
        """(modality code, table, id offset) triples."""
        if self.shared:
            for modality in (Modality.TEXT, Modality.IMAGE, Modality.SPECIAL):
                yield (
                    modality_code(modality),
                    self.fused_embed,
                    self.fused_offset(modality),
                )
        else:
            yield TEXT, self.text_embed, 0
            yield IMAGE, self.image_embed, 0
            yield SPECIAL, self.special_embed, 0

    def check_token(self, token: Token) -> None:
        size = self._table_size(token.modality)
        if not 0 <= token.id < size:
            raise TokenRangeError(
                f"{token.modality.value} id {token.id} outside table of "
                f"size {size}"
            )

    def embed(self, token: Token) -> Tensor:
        self.check_token(token)
        for code, table, offset in self._tables():
            if code == modality_code(token.modality):
                return table.weight[offset + token.id]
        raise TokenRangeError(f"{token.modality.value} tokens have no table")

    def embed_batch(self, kinds: Tensor, ids: Tensor) -> Tensor:
        """Embed (batch, length) modality codes and ids; FEATURE slots stay
        zero for the caller to fill."""
        first = self.fused_embed if self.shared else self.text_embed
        dtype = first.weight.dtype
        out = torch.zeros(*kinds.shape, self.config.d_model, dtype=dtype)
        for code, table, offset in self._tables():
            selected = kinds == code
            if selected.any():
                out[selected] = table(ids[selected] + offset)
        return out

    def _target_indices(
        self, kinds: Tensor, ids: Tensor, mask: Tensor
    ) -> Iterator[Tuple[str, Tensor, Tensor]]:
        """Yield (head, position selector, row index) per head."""
        c = self.config
        if self.shared:
            index = ids.clone()
            for modality in (Modality.TEXT, Modality.IMAGE, Modality.SPECIAL):
                selected = kinds == modality_code(modality)
                index[selected] = ids[selected] + self.fused_offset(modality)
            scorable = mask & (kinds != modality_code(Modality.FEATURE))
            yield "fused", scorable, index
            return
        eot = (kinds == SPECIAL) & (ids == SpecialTokens.EOT.id)
        eoi = (kinds == SPECIAL) & (ids == SpecialTokens.EOI.id)
        text_rows = torch.where(kinds == TEXT, ids, c.text_vocab_size)
        image_rows = torch.where(kinds == IMAGE, ids, c.image_vocab_size)
        yield "text", mask & ((kinds == TEXT) | eot), text_rows
        yield "image", mask & ((kinds == IMAGE) | eoi), image_rows

    def head(self, name: str) -> nn.Linear:
        return {
            "text": lambda: self.text_head,
            "image": lambda: self.image_head,
            "fused": lambda: self.fused_head,
        }[name]()

    def logits_for_loss(
        self,
        hidden: Tensor,
        target_kinds: Tensor,
        target_ids: Tensor,
        mask: Tensor,
    ) -> HeadLogits:
        """Score every supervised position with the head of its target's
        modality. All arguments are aligned (batch, length) tensors, hidden
        has a trailing d_model axis."""
        if mask.shape != target_kinds.shape or hidden.shape[:-1] != mask.shape:
            raise UnscorableTargetError(
                f"mask {tuple(mask.shape)} doesn't align with targets "
                f"{tuple(target_kinds.shape)} and hidden "
                f"{tuple(hidden.shape)}"
            )
        heads = []
        covered = torch.zeros_like(mask)
        for name, selected, rows in self._target_indices(
            target_kinds, target_ids, mask
        ):
            covered |= selected
            logits = self.head(name)(hidden[selected])
            heads.append((name, logits, rows[selected]))
        if (mask & ~covered).any():
            position = tuple((mask & ~covered).nonzero()[0].tolist())
            raise UnscorableTargetError(
                f"supervised target at {position} isn't scored by any head"
            )
        return HeadLogits(tuple(heads))

    def _restricted_logits(
        self, hidden: Tensor, expected: Expected
    ) -> Tuple[Tensor, str]:
        if self.shared:
            return self.fused_head(hidden), "fused"
        name = "image" if expected is Expected.IMAGE_OR_EOI else "text"
        return self.head(name)(hidden), name

    def _to_token(self, index: int, head: str) -> Token:
        c = self.config
        if head == "text":
            if index == c.text_vocab_size:
                return SpecialTokens.EOT
            return Token.text(index)
        if head == "image":
            if index == c.image_vocab_size:
                return SpecialTokens.EOI
            return Token.image(index)
        for modality in (Modality.SPECIAL, Modality.IMAGE, Modality.TEXT):
            offset = self.fused_offset(modality)
            if index >= offset:
                return Token.create(modality=modality, id=index - offset)
        raise TokenRangeError(f"fused index {index} out of range")

    def _terminal_index(self, head: str, expected: Expected) -> int:
        c = self.config
        if head == "text":
            return c.text_vocab_size
        if head == "image":
            return c.image_vocab_size
        terminal = (
            SpecialTokens.EOI
            if expected is Expected.IMAGE_OR_EOI
            else SpecialTokens.EOT
        )
        return self.fused_offset(Modality.SPECIAL) + terminal.id

    def probabilities(self, hidden: Tensor, expected: Expected) -> Tensor:
        logits, _ = self._restricted_logits(hidden, expected)
        return F.softmax(logits, dim=-1)

    def decode_constrained(
        self,
        hidden: Tensor,
        expected: Expected,
        sampler: GenerationConfig,
        generator: Optional[torch.Generator] = None,
        allow_terminal: bool = True,
    ) -> Token:
        """Pick the next token from the table the segment allows.

        Only the permitted head is evaluated, so an image segment can't
        receive a text token (and vice versa) unless the vocabulary is shared.
        `allow_terminal=False` masks [EOI]/[EOT] out.
        """
        logits, head = self._restricted_logits(hidden.reshape(-1), expected)
        if not torch.isfinite(logits).all():
            raise NonFiniteLogitsError(head)
        if not allow_terminal:
            logits = logits.clone()
            logits[self._terminal_index(head, expected)] = -torch.inf
        index = select_index(logits, sampler, generator)
        return self._to_token(index, head)


def select_index(
    logits: Tensor,
    sampler: GenerationConfig,
    generator: Optional[torch.Generator] = None,
) -> int:
    if sampler.is_greedy:
        return int(torch.argmax(logits).item())
    k = min(sampler.top_k, logits.numel())
    values, indices = torch.topk(logits / sampler.temperature, k)
    probs = F.softmax(values, dim=-1)
    choice = torch.multinomial(probs, 1, generator=generator)
    return int(indices[choice].item())


class UnscorableTargetError(UniRouteError):
    def __init__(self, message: str) -> None:
        super().__init__(message, "UNSCORABLE_TARGET")


class NonFiniteLogitsError(UniRouteError):
    def __init__(self, head: str) -> None:
        super().__init__(
            f"non-finite logits from the {head} head", "NON_FINITE_LOGITS"
        )
