from __future__ import annotations

import math

import torch

from uniroute.domain.exception import UniRouteError
from uniroute.domain.schedule import StageConfig


def cosine_warmup_lr(step: int, stage: StageConfig) -> float:
    """Linear 0 -> peak over the warmup, then cosine from peak to 0 at
    total_steps."""
    if not 0 <= step <= stage.total_steps:
        raise ScheduleRangeError(step, stage.total_steps)
    if step < stage.warmup_steps:
        return stage.peak_lr * step / stage.warmup_steps
    decay_steps = stage.total_steps - stage.warmup_steps
    if decay_steps == 0:
        return stage.peak_lr
    progress = (step - stage.warmup_steps) / decay_steps
    return stage.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class CosineWarmupScheduler(torch.optim.lr_scheduler.LambdaLR):
    """Drive an optimizer built with lr=peak_lr along `cosine_warmup_lr`.

    Update i (0-based) runs with cosine_warmup_lr(i).
    """

    def __init__(
        self,
        optimizer: torch.optim.Optimizer,
        stage: StageConfig,
        last_epoch: int = -1,
    ) -> None:
        self.stage = stage
        super().__init__(
            optimizer=optimizer, lr_lambda=self.scale_lr, last_epoch=last_epoch
        )

    def scale_lr(self, step: int) -> float:
        step = min(step, self.stage.total_steps)
        return cosine_warmup_lr(step, self.stage) / self.stage.peak_lr


class ScheduleRangeError(UniRouteError):
    def __init__(self, step: int, total_steps: int) -> None:
        super().__init__(
            f"step {step} outside [0, {total_steps}]", "SCHEDULE_OUT_OF_RANGE"
        )
