"""Stage runner: AdamW over the stage's trainable groups, warmup-cosine
schedule, clipping, metrics log and periodic checkpoints."""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from typing import IO, List, Optional, Sequence, Tuple

import torch
from torch import Tensor

from uniroute import config
from uniroute.data.sequence import collate
from uniroute.domain.exception import UniRouteError
from uniroute.domain.schedule import OptimizerConfig, StageConfig
from uniroute.domain.stream import TrainingExample
from uniroute.domain.task import Stage
from uniroute.model.network import UniRouteModel
from uniroute.persistence.checkpoint import CheckpointStore, save_checkpoint
from uniroute.training.clipping import clip_grad_norm
from uniroute.training.freeze import apply_stage
from uniroute.training.loss import MaskedLoss, task_loss
from uniroute.training.schedule import CosineWarmupScheduler
from uniroute.utils.serializer import json_dumps

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.ommx"


def configure_determinism(strict: bool, seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(strict)
    torch.set_num_threads(1 if strict else config.get_num_threads())


@dataclass(frozen=True, eq=False)
class StepLosses:
    mmu: Optional[MaskedLoss]
    t2i: Optional[MaskedLoss]
    total: Tensor

    @property
    def finite(self) -> bool:
        return bool(torch.isfinite(self.total).item())

    def value_of(self, loss: Optional[MaskedLoss]) -> Optional[float]:
        return None if loss is None else float(loss.value.item())


def unified_step(
    model: UniRouteModel,
    mmu_batch: Sequence[TrainingExample],
    t2i_batch: Sequence[TrainingExample],
    backward: bool = True,
) -> StepLosses:
    """Sum the per-task mean losses and run one backward pass.

    Each sub-batch runs on the route its examples carry. Nothing is
    back-propagated when the sum isn't finite.
    """
    mmu = task_loss(model, collate(mmu_batch)) if mmu_batch else None
    t2i = task_loss(model, collate(t2i_batch)) if t2i_batch else None
    parts = [loss.value for loss in (mmu, t2i) if loss is not None]
    if not parts:
        raise UniRouteError("step without examples", "EMPTY_STEP")
    total = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    losses = StepLosses(mmu=mmu, t2i=t2i, total=total)
    if backward and losses.finite and total.requires_grad:
        total.backward()
    return losses


class ExampleSampler:
    """Deterministic draws without replacement, reshuffled every pass."""

    def __init__(
        self, examples: Sequence[TrainingExample], generator: torch.Generator
    ) -> None:
        self.examples = list(examples)
        self.generator = generator
        self._order: List[int] = []

    def draw(self, count: int) -> List[TrainingExample]:
        if count and not self.examples:
            raise UniRouteError("no examples to draw from", "EMPTY_DATASET")
        batch = []
        for _ in range(count):
            if not self._order:
                self._order = torch.randperm(
                    len(self.examples), generator=self.generator
                ).tolist()
            batch.append(self.examples[self._order.pop(0)])
        return batch


@dataclass(frozen=True, eq=False)
class StageData:
    """Example pools of a stage. Text-only pretraining draws from `mmu`."""

    mmu: Sequence[TrainingExample] = ()
    t2i: Sequence[TrainingExample] = ()


@dataclass(frozen=True)
class StepRecord:
    step: int
    stage: str
    lr: float
    mmu_loss: Optional[float]
    t2i_loss: Optional[float]
    grad_norm: float
    wall_ms: float


@dataclass
class StageResult:
    records: List[StepRecord] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    empty_batches: int = 0
    optimizer: Optional[torch.optim.Optimizer] = None

    @property
    def final_checkpoint(self) -> Optional[str]:
        return self.checkpoints[-1] if self.checkpoints else None


def _stage_counts(stage: StageConfig) -> Tuple[int, int]:
    if stage.stage is Stage.LM:
        return stage.mmu_count + stage.t2i_count, 0
    return stage.mmu_count, stage.t2i_count


def run_stage(
    model: UniRouteModel,
    stage: StageConfig,
    data: StageData,
    out_dir: str,
    optimizer_config: Optional[OptimizerConfig] = None,
    seed: int = 0,
    strict: bool = True,
) -> StageResult:
    """Train the stage's groups for `total_steps` updates.

    Writes one metrics record per step to `metrics.jsonl` in out_dir,
    checkpoints every `checkpoint_every` steps and at the end.
    """
    optimizer_config = optimizer_config or OptimizerConfig()
    os.makedirs(out_dir, exist_ok=True)
    model.train()
    trainable = apply_stage(model, stage.stage, model.config.shared_vocab)
    optimizer = torch.optim.AdamW(
        [p for _, p in trainable],
        lr=stage.peak_lr,
        betas=(optimizer_config.beta1, optimizer_config.beta2),
        eps=optimizer_config.eps,
        weight_decay=optimizer_config.weight_decay,
    )
    scheduler = CosineWarmupScheduler(optimizer, stage)
    generator = torch.Generator().manual_seed(seed)
    mmu_sampler = ExampleSampler(data.mmu, generator)
    t2i_sampler = ExampleSampler(data.t2i, generator)
    mmu_count, t2i_count = _stage_counts(stage)

    result = StageResult(optimizer=optimizer)
    last_good: Optional[str] = None
    logger.info(
        "Stage %s: %s steps, %s trainable tensors, %s parameters",
        stage.stage.value,
        stage.total_steps,
        len(trainable),
        model.trainable_parameter_count(),
    )
    with open(os.path.join(out_dir, METRICS_FILE), "w") as metrics:
        for step in range(stage.total_steps):
            started = time.perf_counter_ns()
            lr = optimizer.param_groups[0]["lr"]
            optimizer.zero_grad(set_to_none=True)
            losses = unified_step(
                model,
                mmu_sampler.draw(mmu_count),
                t2i_sampler.draw(t2i_count),
            )
            if not losses.finite:
                raise NonFiniteLossError(step, last_good)
            result.empty_batches += sum(
                1 for loss in (losses.mmu, losses.t2i) if loss and loss.empty
            )
            grad_norm = clip_grad_norm(
                trainable, optimizer_config.max_grad_norm
            )
            optimizer.step()
            scheduler.step()

            wall_ms = 0.0
            if not strict:
                wall_ms = (time.perf_counter_ns() - started) / 1e6
            record = StepRecord(
                step=step,
                stage=stage.stage.value,
                lr=lr,
                mmu_loss=losses.value_of(losses.mmu),
                t2i_loss=losses.value_of(losses.t2i),
                grad_norm=grad_norm,
                wall_ms=wall_ms,
            )
            _write_record(metrics, record)
            result.records.append(record)

            done = step + 1
            if stage.checkpoint_every and done % stage.checkpoint_every == 0:
                last_good = _checkpoint(model, stage, done, out_dir, done)
                result.checkpoints.append(last_good)

    result.checkpoints.append(
        _checkpoint(model, stage, stage.total_steps, out_dir)
    )
    if result.empty_batches:
        logger.warning(
            "Stage %s saw %s batches without supervised positions",
            stage.stage.value,
            result.empty_batches,
        )
    logger.info("Stage %s done", stage.stage.value)
    return result


def _write_record(stream: IO[str], record: StepRecord) -> None:
    stream.write(json_dumps(record) + "\n")
    stream.flush()


def _checkpoint(
    model: UniRouteModel,
    stage: StageConfig,
    step: int,
    out_dir: str,
    tag: Optional[int] = None,
) -> str:
    name = CHECKPOINT_FILE if tag is None else f"step_{tag:06d}.ommx"
    store = CheckpointStore.from_model(model, stage.stage.value, step)
    return save_checkpoint(store, os.path.join(out_dir, name))


class NonFiniteLossError(UniRouteError):
    def __init__(self, step: int, last_checkpoint: Optional[str]) -> None:
        where = last_checkpoint or "none written yet"
        super().__init__(
            f"non-finite loss at step {step}; last good checkpoint: {where}",
            "NON_FINITE_LOSS",
        )
        self.step = step
        self.last_checkpoint = last_checkpoint
