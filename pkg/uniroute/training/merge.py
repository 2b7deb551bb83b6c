from __future__ import annotations

import logging
import os
from typing import Optional

import torch

from uniroute.domain.exception import UniRouteError
from uniroute.domain.task import Stage
from uniroute.persistence.checkpoint import (
    CheckpointStore,
    load_checkpoint,
    save_checkpoint,
)
from uniroute.training.freeze import trainable_groups

logger = logging.getLogger(__name__)


def merge_branches(
    mmu_path: str, t2i_path: str, out_path: Optional[str] = None
) -> CheckpointStore:
    """Join the two stage-1 branches into the stage-2 starting store.

    The MMU branch contributes the groups it trained, the T2I branch
    likewise; every other tensor must be bit-identical in both files.
    """
    for branch, path in ((Stage.MMU, mmu_path), (Stage.T2I, t2i_path)):
        if not path or not os.path.exists(path):
            raise MissingBranchError(branch, path)
    mmu = load_checkpoint(mmu_path)
    t2i = load_checkpoint(t2i_path)
    if mmu.stage != Stage.MMU.value or t2i.stage != Stage.T2I.value:
        raise CheckpointMergeError(
            f"expected {Stage.MMU.value} and {Stage.T2I.value} branches, "
            f"got {mmu.stage} and {t2i.stage}"
        )
    if mmu.config != t2i.config:
        raise CheckpointMergeError(
            "branches were trained with different configs"
        )
    if set(mmu.tensors) != set(t2i.tensors):
        raise CheckpointMergeError("branches hold different tensor names")

    shared = mmu.config.shared_vocab
    from_mmu = trainable_groups(Stage.MMU, shared)
    from_t2i = trainable_groups(Stage.T2I, shared)
    tensors = {}
    for name in sorted(mmu.tensors):
        group = mmu.groups[name]
        if group in from_mmu:
            tensors[name] = mmu.tensors[name]
        elif group in from_t2i:
            tensors[name] = t2i.tensors[name]
        elif torch.equal(mmu.tensors[name], t2i.tensors[name]):
            tensors[name] = mmu.tensors[name]
        else:
            raise CheckpointMergeError(
                f"{name} ({group.value}) differs between the branches"
            )
    merged = CheckpointStore(
        config=mmu.config,
        tensors=tensors,
        groups=dict(mmu.groups),
        stage="merged",
        step=0,
    )
    if out_path:
        save_checkpoint(merged, out_path)
    logger.info("Merged %s and %s", mmu_path, t2i_path)
    return merged


class MissingBranchError(UniRouteError):
    def __init__(self, branch: Stage, path: Optional[str]) -> None:
        super().__init__(
            f"stage 2 needs the {branch.value} checkpoint, none at {path}",
            "MISSING_BRANCH",
        )
        self.branch = branch


class CheckpointMergeError(UniRouteError):
    def __init__(self, message: str) -> None:
        super().__init__(message, "CHECKPOINT_MERGE_ERROR")
