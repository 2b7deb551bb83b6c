from __future__ import annotations

from dataclasses import dataclass

from uniroute.domain.exception import InvalidConfigError
from uniroute.domain.task import Stage
from uniroute.domain.value_object import ValueObject


@dataclass(frozen=True)
class StageConfig(ValueObject):
    """Schedule of one training stage.

    Args:
        stage: Which stage this schedule drives.
        peak_lr: Learning rate reached at the end of warmup.
        warmup_steps: Linear warmup length, from 0 to peak_lr.
        total_steps: Optimizer updates in the stage.
        mmu_count: MMU examples per step.
        t2i_count: T2I examples per step.
        checkpoint_every: Checkpoint cadence in steps, 0 writes only the
            final checkpoint.
    """

    stage: Stage
    peak_lr: float
    warmup_steps: int
    total_steps: int
    mmu_count: int
    t2i_count: int
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.peak_lr <= 0:
            raise InvalidConfigError("peak_lr must be positive")
        if self.total_steps <= 0:
            raise InvalidConfigError("total_steps must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise InvalidConfigError(
                "warmup_steps must be in [0, total_steps]"
            )
        if self.mmu_count < 0 or self.t2i_count < 0:
            raise InvalidConfigError("batch counts must be non-negative")
        if self.mmu_count + self.t2i_count == 0:
            raise InvalidConfigError("a step needs at least one example")
        if self.checkpoint_every < 0:
            raise InvalidConfigError("checkpoint_every must be non-negative")
        if self.stage is Stage.MMU and self.t2i_count:
            raise InvalidConfigError("stage 1mmu takes MMU examples only")
        if self.stage is Stage.T2I and self.mmu_count:
            raise InvalidConfigError("stage 1t2i takes T2I examples only")

    @classmethod
    def default_for(cls, stage: Stage) -> StageConfig:
        return cls.create(stage=stage, **DEFAULT_SCHEDULES[stage])


# Desk-scale schedules keep the original ordering of learning rates and the
# T2I-heavy ratio of the unified stage.
DEFAULT_SCHEDULES = {
    Stage.LM: dict(
        peak_lr=1e-3, warmup_steps=100, total_steps=1000, mmu_count=16,
        t2i_count=0, checkpoint_every=0,
    ),
    Stage.MMU: dict(
        peak_lr=1e-3, warmup_steps=100, total_steps=2000, mmu_count=16,
        t2i_count=0, checkpoint_every=500,
    ),
    Stage.T2I: dict(
        peak_lr=8e-4, warmup_steps=200, total_steps=5000, mmu_count=0,
        t2i_count=16, checkpoint_every=1000,
    ),
    Stage.UNIFIED: dict(
        peak_lr=1e-4, warmup_steps=0, total_steps=5000, mmu_count=4,
        t2i_count=16, checkpoint_every=1000,
    ),
}


@dataclass(frozen=True)
class OptimizerConfig(ValueObject):
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0

    def validate(self) -> None:
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfigError("betas must be in [0, 1)")
        if self.eps <= 0 or self.max_grad_norm <= 0:
            raise InvalidConfigError("eps and max_grad_norm must be positive")
        if self.weight_decay < 0:
            raise InvalidConfigError("weight_decay must be non-negative")
