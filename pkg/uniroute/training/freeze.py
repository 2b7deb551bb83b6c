"""Named parameter groups and the trainable subset of every stage."""
from __future__ import annotations

import hashlib
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Tuple

from torch import nn

from uniroute.domain.exception import UniRouteError
from uniroute.domain.task import Stage


class FreezeGroup(Enum):
    CORE_MAMBA = "core_mamba"
    MMU_LORA = "mmu_lora"
    T2I_LORA = "t2i_lora"
    VISUAL_PROJECTOR = "visual_projector"
    IMAGE_HEAD = "image_head"
    TEXT_HEAD = "text_head"
    EMBEDDINGS = "embeddings"
    FROZEN_VISION_ENCODER = "frozen_vision_encoder"


_PREFIXES: Tuple[Tuple[str, FreezeGroup], ...] = (
    ("vocab.text_embed.", FreezeGroup.EMBEDDINGS),
    ("vocab.image_embed.", FreezeGroup.EMBEDDINGS),
    ("vocab.special_embed.", FreezeGroup.EMBEDDINGS),
    ("vocab.fused_embed.", FreezeGroup.EMBEDDINGS),
    ("vocab.text_head.", FreezeGroup.TEXT_HEAD),
    ("vocab.fused_head.", FreezeGroup.TEXT_HEAD),
    ("vocab.image_head.", FreezeGroup.IMAGE_HEAD),
    ("projector.", FreezeGroup.VISUAL_PROJECTOR),
    ("vision_encoder.", FreezeGroup.FROZEN_VISION_ENCODER),
)


def group_of(name: str) -> FreezeGroup:
    if name.startswith("backbone."):
        if ".adapters.mmu." in name:
            return FreezeGroup.MMU_LORA
        if ".adapters.t2i." in name:
            return FreezeGroup.T2I_LORA
        return FreezeGroup.CORE_MAMBA
    for prefix, group in _PREFIXES:
        if name.startswith(prefix):
            return group
    raise UnknownParameterError(name)


def trainable_groups(
    stage: Stage, shared_vocab: bool = False
) -> FrozenSet[FreezeGroup]:
    """With a shared vocabulary the fused head sits in `text_head`, so the
    T2I branch trains that group instead of `image_head`."""
    if stage is Stage.LM:
        return frozenset(
            {
                FreezeGroup.CORE_MAMBA,
                FreezeGroup.EMBEDDINGS,
                FreezeGroup.TEXT_HEAD,
            }
        )
    if stage is Stage.MMU:
        return frozenset({FreezeGroup.VISUAL_PROJECTOR, FreezeGroup.MMU_LORA})
    if stage is Stage.T2I:
        if shared_vocab:
            return frozenset({FreezeGroup.T2I_LORA, FreezeGroup.TEXT_HEAD})
        return frozenset({FreezeGroup.T2I_LORA, FreezeGroup.IMAGE_HEAD})
    return frozenset(FreezeGroup) - {FreezeGroup.FROZEN_VISION_ENCODER}


NamedParameters = List[Tuple[str, nn.Parameter]]


def partition(model: nn.Module) -> Dict[FreezeGroup, NamedParameters]:
    groups: Dict[FreezeGroup, NamedParameters] = {
        group: [] for group in FreezeGroup
    }
    for name, parameter in model.named_parameters():
        groups[group_of(name)].append((name, parameter))
    return groups


def apply_stage(
    model: nn.Module, stage: Stage, shared_vocab: bool = False
) -> List[Tuple[str, nn.Parameter]]:
    """Set requires_grad per group and return the trainable parameters in
    registration order."""
    active = trainable_groups(stage, shared_vocab)
    trainable = []
    for name, parameter in model.named_parameters():
        flag = group_of(name) in active
        parameter.requires_grad_(flag)
        if flag:
            trainable.append((name, parameter))
    return trainable


def group_digest(model: nn.Module, groups: Iterable[FreezeGroup]) -> str:
    """Hash of the exact bytes of every parameter in the given groups."""
    wanted = set(groups)
    digest = hashlib.blake2b(digest_size=16)
    for name, parameter in model.named_parameters():
        if group_of(name) in wanted:
            digest.update(name.encode("utf-8"))
            digest.update(
                parameter.detach().cpu().contiguous().numpy().tobytes()
            )
    return digest.hexdigest()


class UnknownParameterError(UniRouteError):
    def __init__(self, name: str) -> None:
        super().__init__(
            f"parameter {name!r} belongs to no freeze group",
            "UNKNOWN_PARAMETER_GROUP",
        )
