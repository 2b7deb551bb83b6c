from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

from uniroute.data.dataset import Record
from uniroute.data.sequence import mmu_prompt, t2i_prompt
from uniroute.data.tokenizer import WordTokenizer
from uniroute.data.toy import parse_caption
from uniroute.domain.generation import GenerationConfig
from uniroute.domain.task import TaskRoute
from uniroute.domain.token import Token, TokenRangeError
from uniroute.inference.generate import decode_image, decode_text
from uniroute.model.network import UniRouteModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalReport:
    """Exact-match counts of both tasks.

    `cross_modal_tokens` counts tokens of the wrong modality emitted inside
    a segment; it stays 0 unless the vocabulary is shared. `invalid_images`
    counts grids holding codes outside the codebook.
    """

    mmu_total: int = 0
    mmu_correct: int = 0
    t2i_total: int = 0
    t2i_correct: int = 0
    cross_modal_tokens: int = 0
    invalid_images: int = 0

    @property
    def mmu_accuracy(self) -> float:
        return self.mmu_correct / self.mmu_total if self.mmu_total else 0.0

    @property
    def t2i_accuracy(self) -> float:
        return self.t2i_correct / self.t2i_total if self.t2i_total else 0.0

    def summary(self) -> dict:
        return {
            "mmu_accuracy": self.mmu_accuracy,
            "t2i_accuracy": self.t2i_accuracy,
            "mmu_total": self.mmu_total,
            "t2i_total": self.t2i_total,
            "cross_modal_tokens": self.cross_modal_tokens,
            "invalid_images": self.invalid_images,
        }


def evaluate(
    model: UniRouteModel,
    tokenizer: WordTokenizer,
    records: Sequence[Record],
    config: Optional[GenerationConfig] = None,
    question: str = "describe the image",
) -> EvalReport:
    model.eval()
    question_tokens = [Token.text(i) for i in tokenizer.encode(question)]
    counts = dict(
        mmu_total=0,
        mmu_correct=0,
        t2i_total=0,
        t2i_correct=0,
        cross_modal_tokens=0,
        invalid_images=0,
    )
    for record in records:
        caption = [Token.text(i) for i in tokenizer.encode(record.caption)]
        if record.task is TaskRoute.MMU:
            features = model.encode_image(record.grid)
            prompt = mmu_prompt(features, question_tokens)
            text = decode_text(model, prompt, config)
            counts["mmu_total"] += 1
            counts["mmu_correct"] += int(list(text.tokens) == caption)
            counts["cross_modal_tokens"] += text.cross_modal_tokens
            continue

        image = decode_image(model, t2i_prompt(caption), config)
        counts["t2i_total"] += 1
        counts["cross_modal_tokens"] += image.cross_modal_tokens
        try:
            grid = image.image()
        except TokenRangeError:
            counts["invalid_images"] += 1
            continue
        counts["t2i_correct"] += int(grid == parse_caption(record.caption))

    report = EvalReport(**counts)
    logger.info(
        "Eval: MMU %s/%s, T2I %s/%s",
        report.mmu_correct,
        report.mmu_total,
        report.t2i_correct,
        report.t2i_total,
    )
    return report
