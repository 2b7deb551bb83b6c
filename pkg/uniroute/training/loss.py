from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from uniroute.data.sequence import Batch
from uniroute.model.network import UniRouteModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MaskedLoss:
    """Mean cross-entropy over `count` supervised positions."""

    value: Tensor
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0

    @classmethod
    def combine(
        cls, parts: Sequence[MaskedLoss], anchor: Tensor
    ) -> MaskedLoss:
        """Pool parts into one mean over all their positions. `anchor` keeps
        the result on the autograd graph when every part is empty."""
        count = sum(part.count for part in parts)
        if count == 0:
            return cls(anchor.sum() * 0.0, 0)
        total = sum(part.value * part.count for part in parts if part.count)
        return cls(total / count, count)  # type: ignore[operator]


def cross_entropy_loss(
    logits: Tensor, targets: Tensor, mask: Tensor
) -> MaskedLoss:
    """Mean cross-entropy of (n, V) logits over the positions where mask
    holds; an empty mask gives a zero loss with zero gradients."""
    count = int(mask.sum().item())
    if count == 0:
        logger.warning("Batch has no supervised positions, loss set to 0")
        return MaskedLoss(logits.sum() * 0.0, 0)
    total = F.cross_entropy(logits[mask], targets[mask], reduction="sum")
    return MaskedLoss(total / count, count)


def task_loss(model: UniRouteModel, batch: Batch) -> MaskedLoss:
    """Next-token loss of one route's batch, each target scored by the head
    of its modality."""
    hidden = model.hidden_states(batch)
    scored = model.vocab.logits_for_loss(
        hidden, batch.target_kinds, batch.target_ids, batch.target_mask
    )
    parts = [
        cross_entropy_loss(
            logits, rows, torch.ones_like(rows, dtype=torch.bool)
        )
        for _, logits, rows in scored.heads
        if rows.numel()
    ]
    if not parts:
        logger.warning("Batch has no supervised positions, loss set to 0")
    return MaskedLoss.combine(parts, anchor=hidden)
