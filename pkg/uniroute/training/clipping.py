from __future__ import annotations

from typing import Iterable, List, Tuple

import torch
from torch import nn

from uniroute.domain.exception import UniRouteError


def clip_grad_norm(
    named_parameters: Iterable[Tuple[str, nn.Parameter]],
    max_norm: float = 1.0,
) -> float:
    """Rescale gradients in place so their global L2 norm is at most
    max_norm and return the norm before clipping.

    Gradients already within the bound are left bit-identical.
    """
    named = [(n, p) for n, p in named_parameters if p.grad is not None]
    bad = [n for n, p in named if not torch.isfinite(p.grad).all()]
    if bad:
        raise NonFiniteGradientError(bad)
    if not named:
        return 0.0
    norm = torch.nn.utils.clip_grad_norm_(
        [p for _, p in named], max_norm, error_if_nonfinite=True
    )
    return float(norm.item())


class NonFiniteGradientError(UniRouteError):
    def __init__(self, names: List[str]) -> None:
        shown = ", ".join(names[:5])
        more = f" and {len(names) - 5} more" if len(names) > 5 else ""
        super().__init__(
            f"non-finite gradient in {shown}{more}", "NON_FINITE_GRADIENT"
        )
        self.parameter_names = names
