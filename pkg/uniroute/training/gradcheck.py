"""Central finite-difference check of autograd gradients.

Meant for the 64-bit model (`model.double()`); each parameter group is
probed at the coordinates with the largest analytic gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np
import torch
from torch import Tensor, nn

from uniroute.training.freeze import FreezeGroup, partition


@dataclass(frozen=True)
class GradCheckResult:
    group: FreezeGroup
    name: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def relative_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric), 1e-12)
        return abs(self.analytic - self.numeric) / scale


def finite_difference_check(
    model: nn.Module,
    loss_fn: Callable[[], Tensor],
    eps: float = 1e-3,
    per_group: int = 2,
) -> List[GradCheckResult]:
    model.zero_grad(set_to_none=True)
    loss_fn().backward()

    results = []
    for group, named in partition(model).items():
        if group is FreezeGroup.FROZEN_VISION_ENCODER:
            continue
        candidates = []
        for name, parameter in named:
            if parameter.grad is None:
                continue
            flat = parameter.grad.detach().abs().reshape(-1)
            k = min(per_group, flat.numel())
            values, positions = torch.topk(flat, k)
            for value, position in zip(values.tolist(), positions.tolist()):
                candidates.append((value, name, parameter, position))
        candidates.sort(key=lambda c: (-c[0], c[1], c[3]))
        for _, name, parameter, position in candidates[:per_group]:
            index = tuple(
                int(i)
                for i in np.unravel_index(position, tuple(parameter.shape))
            )
            numeric = _central_difference(parameter, index, loss_fn, eps)
            results.append(
                GradCheckResult(
                    group=group,
                    name=name,
                    index=index,
                    analytic=float(parameter.grad[index].item()),
                    numeric=numeric,
                )
            )
    return results


def _central_difference(
    parameter: nn.Parameter,
    index: Tuple[int, ...],
    loss_fn: Callable[[], Tensor],
    eps: float,
) -> float:
    with torch.no_grad():
        original = parameter[index].item()
        parameter[index] = original + eps
        upper = loss_fn().item()
        parameter[index] = original - eps
        lower = loss_fn().item()
        parameter[index] = original
    return (upper - lower) / (2 * eps)
