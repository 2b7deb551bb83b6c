from enum import Enum


class TaskRoute(Enum):
    """Which LoRA branch is active for a forward pass."""

    MMU = "mmu"
    T2I = "t2i"
    NONE = "none"

    @property
    def is_routed(self) -> bool:
        return self is not TaskRoute.NONE


class Stage(Enum):
    LM = "0lm"
    MMU = "1mmu"
    T2I = "1t2i"
    UNIFIED = "2"
