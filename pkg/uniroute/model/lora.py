"""Task-routed low-rank adapters on the fused input projection."""
from __future__ import annotations

import math
from typing import Dict, Optional, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from uniroute.domain.exception import UniRouteError
from uniroute.domain.model_config import ModelConfig
from uniroute.domain.task import TaskRoute

ROUTES = (TaskRoute.MMU, TaskRoute.T2I)


class LoraAdapter(nn.Module):
    """Delta `scaling * up @ down @ x` with `up` zero at init.

    Args:
        d_in: Input width of the wrapped projection.
        d_out: Output width of the wrapped projection.
        rank: Bottleneck width r.
        alpha: Scale numerator; the delta is multiplied by alpha / r.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float) -> None:
        super().__init__()
        self.rank = rank
        self.alpha = alpha
        self.down = nn.Parameter(torch.empty(rank, d_in))
        self.up = nn.Parameter(torch.zeros(d_out, rank))
        bound = 1.0 / math.sqrt(d_in)
        nn.init.uniform_(self.down, -bound, bound)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self, x: Tensor) -> Tensor:
        return self.scaling * F.linear(F.linear(x, self.down), self.up)

    def parameter_count(self) -> int:
        return self.down.numel() + self.up.numel()


class RoutedLinear(nn.Module):
    """Bias-free projection plus one adapter per task route.

    Only the adapter of the requested route takes part in the forward pass,
    so the other route's parameters never enter the autograd graph.
    """

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rank: int,
        alpha: float,
        layer_idx: int = 0,
    ) -> None:
        super().__init__()
        self.layer_idx = layer_idx
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.adapters = nn.ModuleDict()
        if rank > 0:
            for route in ROUTES:
                self.adapters[route.value] = LoraAdapter(
                    d_in, d_out, rank, alpha
                )

    def adapter_for(self, route: TaskRoute) -> Optional[LoraAdapter]:
        if not route.is_routed or route.value not in self.adapters:
            return None
        return self.adapters[route.value]  # type: ignore

    def forward(self, x: Tensor, route: TaskRoute) -> Tensor:
        return routed_projection(
            self.weight, self.adapters, x, route, self.layer_idx
        )


def routed_projection(
    weight: Tensor,
    adapters: Union[nn.ModuleDict, Dict[str, LoraAdapter]],
    x: Tensor,
    route: TaskRoute,
    layer_idx: int = 0,
) -> Tensor:
    """Return W x, plus the active route's low-rank delta."""
    base = F.linear(x, weight)
    if not route.is_routed or route.value not in adapters:
        return base
    adapter = adapters[route.value]
    d_out, d_in = weight.shape
    if adapter.down.shape[1] != d_in or adapter.up.shape[0] != d_out:
        raise LoraShapeError(layer_idx, route, tuple(weight.shape))
    return base + adapter.delta(x)


def lora_param_fraction(config: ModelConfig) -> float:
    """Adapter parameters over backbone parameters, by closed form.

    The denominator counts the mixer layers, their pre-norms and the final
    norm; vocabulary tables and heads are left out.
    """
    if config.lora_rank == 0:
        return 0.0
    adapters = (
        len(ROUTES)
        * config.lora_rank
        * (config.d_model + config.d_in_proj)
        * config.n_layers
    )
    return adapters / backbone_param_count(config)


def backbone_param_count(config: ModelConfig) -> int:
    per_layer = (
        config.d_model * config.d_in_proj  # in_proj
        + config.conv_dim * config.d_conv  # depthwise conv, no bias
        + 3 * config.n_heads  # A_log, dt_bias, D
        + config.d_inner  # gated norm
        + config.d_inner * config.d_model  # out_proj
        + config.d_model  # pre-norm
    )
    return per_layer * config.n_layers + config.d_model


class LoraShapeError(UniRouteError):
    def __init__(self, layer_idx: int, route: TaskRoute, shape: tuple) -> None:
        super().__init__(
            f"layer {layer_idx}: {route.value} adapter doesn't match "
            f"projection of shape {shape}",
            "LORA_SHAPE_MISMATCH",
        )
