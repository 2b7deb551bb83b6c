from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange, repeat
from torch import Tensor, nn

from uniroute.domain.exception import UniRouteError
from uniroute.domain.model_config import ModelConfig
from uniroute.domain.task import TaskRoute
from uniroute.model.lora import RoutedLinear, backbone_param_count
from uniroute.model.ssd import ssd_chunked, ssd_step
from uniroute.ports.backbone import AbstractBackbone, AbstractDecodeState

DT_MIN = 1e-3
DT_MAX = 1e-1
A_INIT_RANGE = (1.0, 16.0)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: Tensor) -> Tensor:
        scale = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return x * scale * self.weight


class GatedRMSNorm(RMSNorm):
    """rmsnorm(y * silu(z)) * weight."""

    def forward(self, x: Tensor, gate: Optional[Tensor] = None) -> Tensor:
        if gate is not None:
            x = x * F.silu(gate)
        return super().forward(x)


@dataclass(frozen=True)
class LayerState:
    """Constant-size decode memory of one block.

    Args:
        conv_buffer: (batch, conv_dim, d_conv - 1) last pre-activation
            inputs of the causal convolution, oldest first.
        ssm_state: (batch, heads, headdim, d_state) recurrent state.
    """

    conv_buffer: Tensor
    ssm_state: Tensor

    @property
    def nbytes(self) -> int:
        return sum(
            t.numel() * t.element_size()
            for t in (self.conv_buffer, self.ssm_state)
        )


@dataclass(frozen=True)
class SsmDecodeState(AbstractDecodeState):
    layers: Tuple[LayerState, ...]

    @property
    def nbytes(self) -> int:
        return sum(layer.nbytes for layer in self.layers)


class Mamba2Block(nn.Module):
    """Fused in-projection, causal conv + SiLU on x/B/C, scalar-decay SSM
    per head, gated RMS norm, out-projection."""

    def __init__(self, config: ModelConfig, layer_idx: int = 0) -> None:
        super().__init__()
        self.config = config
        self.layer_idx = layer_idx
        self.in_proj = RoutedLinear(
            config.d_model,
            config.d_in_proj,
            config.lora_rank,
            config.lora_alpha,
            layer_idx,
        )
        self.conv_weight = nn.Parameter(
            torch.empty(config.conv_dim, config.d_conv)
        )
        bound = 1.0 / math.sqrt(config.d_conv)
        nn.init.uniform_(self.conv_weight, -bound, bound)

        dt = torch.exp(
            torch.rand(config.n_heads) * (math.log(DT_MAX) - math.log(DT_MIN))
            + math.log(DT_MIN)
        )
        # inverse softplus, so softplus(dt_bias) == dt
        self.dt_bias = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))
        low, high = A_INIT_RANGE
        self.A_log = nn.Parameter(
            torch.log(torch.empty(config.n_heads).uniform_(low, high))
        )
        self.D = nn.Parameter(torch.ones(config.n_heads))
        self.norm = GatedRMSNorm(config.d_inner, config.norm_eps)
        self.out_proj = nn.Linear(config.d_inner, config.d_model, bias=False)

    def _split(self, zxbcdt: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        c = self.config
        return torch.split(zxbcdt, [c.d_inner, c.conv_dim, c.n_heads], dim=-1)

    def _ssm_inputs(
        self, xbc: Tensor, dt_raw: Tensor
    ) -> Tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
        c = self.config
        x, B, C = torch.split(
            xbc,
            [c.d_inner, c.n_groups * c.d_state, c.n_groups * c.d_state],
            dim=-1,
        )
        x = rearrange(x, "... (h p) -> ... h p", p=c.headdim)
        heads_per_group = c.n_heads // c.n_groups
        B, C = (
            repeat(
                t, "... (g n) -> ... (g r) n", g=c.n_groups, r=heads_per_group
            )
            for t in (B, C)
        )
        dt = F.softplus(dt_raw + self.dt_bias)
        A = -torch.exp(self.A_log)
        return x, dt, A, B, C

    def _output(self, y: Tensor, x: Tensor, z: Tensor) -> Tensor:
        y = y + x * rearrange(self.D, "h -> h 1")
        y = rearrange(y, "... h p -> ... (h p)")
        return self.out_proj(self.norm(y, z))

    def _check_finite(self, hidden: Tensor) -> None:
        if not torch.isfinite(hidden).all():
            raise NonFiniteActivationError(self.layer_idx)

    def forward(
        self,
        hidden: Tensor,
        route: TaskRoute = TaskRoute.NONE,
        chunk_len: Optional[int] = None,
    ) -> Tensor:
        out, _ = self.forward_with_state(hidden, route, chunk_len)
        return out

    def forward_with_state(
        self,
        hidden: Tensor,
        route: TaskRoute = TaskRoute.NONE,
        chunk_len: Optional[int] = None,
    ) -> Tuple[Tensor, LayerState]:
        """Parallel pass over (batch, length, d_model); also returns the
        decode state after the last position."""
        self._check_finite(hidden)
        chunk_len = chunk_len or self.config.chunk_len
        if chunk_len < 1:
            raise ValueError("chunk_len must be >= 1")
        length = hidden.shape[1]
        z, xbc, dt_raw = self._split(self.in_proj(hidden, route))

        width = self.config.d_conv
        padded = F.pad(rearrange(xbc, "b l c -> b c l"), (width - 1, 0))
        conv_buffer = padded[:, :, padded.shape[-1] - (width - 1) :]
        kernel = rearrange(self.conv_weight, "c k -> c 1 k")
        conv = F.conv1d(padded, kernel, groups=self.config.conv_dim)
        xbc = F.silu(rearrange(conv[:, :, :length], "b c l -> b l c"))

        x, dt, A, B, C = self._ssm_inputs(xbc, dt_raw)
        y, ssm_state = ssd_chunked(x, dt, A, B, C, chunk_len)
        out = self._output(y, x, z)
        return out, LayerState(conv_buffer=conv_buffer, ssm_state=ssm_state)

    def init_state(
        self, batch_size: int, dtype: torch.dtype = torch.float32
    ) -> LayerState:
        c = self.config
        return LayerState(
            conv_buffer=torch.zeros(
                batch_size, c.conv_dim, c.d_conv - 1, dtype=dtype
            ),
            ssm_state=torch.zeros(
                batch_size, c.n_heads, c.headdim, c.d_state, dtype=dtype
            ),
        )

    def step(
        self,
        state: LayerState,
        hidden: Tensor,
        route: TaskRoute = TaskRoute.NONE,
    ) -> Tuple[LayerState, Tensor]:
        """Advance one position; hidden is (batch, d_model). Pure: the given
        state is left untouched."""
        self._check_finite(hidden)
        self._check_state(state, hidden.shape[0])
        z, xbc, dt_raw = self._split(self.in_proj(hidden, route))

        window = torch.cat([state.conv_buffer, xbc.unsqueeze(-1)], dim=-1)
        xbc = F.silu((window * self.conv_weight).sum(-1))

        x, dt, A, B, C = self._ssm_inputs(xbc, dt_raw)
        ssm_state, y = ssd_step(state.ssm_state, x, dt, A, B, C)
        out = self._output(y, x, z)
        next_state = LayerState(
            conv_buffer=window[:, :, 1:], ssm_state=ssm_state
        )
        return next_state, out

    def _check_state(self, state: LayerState, batch_size: int) -> None:
        c = self.config
        expected = (
            (batch_size, c.conv_dim, c.d_conv - 1),
            (batch_size, c.n_heads, c.headdim, c.d_state),
        )
        actual = (
            tuple(state.conv_buffer.shape),
            tuple(state.ssm_state.shape),
        )
        if actual != expected:
            raise StateShapeError(self.layer_idx, expected, actual)


class MixerLayer(nn.Module):
    """Pre-norm residual wrapper: x + block(rmsnorm(x))."""

    def __init__(self, config: ModelConfig, layer_idx: int) -> None:
        super().__init__()
        self.norm = RMSNorm(config.d_model, config.norm_eps)
        self.mixer = Mamba2Block(config, layer_idx)

    def forward_with_state(
        self, hidden: Tensor, route: TaskRoute, chunk_len: Optional[int]
    ) -> Tuple[Tensor, LayerState]:
        out, state = self.mixer.forward_with_state(
            self.norm(hidden), route, chunk_len
        )
        return hidden + out, state

    def step(
        self, state: LayerState, hidden: Tensor, route: TaskRoute
    ) -> Tuple[LayerState, Tensor]:
        state, out = self.mixer.step(state, self.norm(hidden), route)
        return state, hidden + out


class SsmBackbone(AbstractBackbone):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(
            [MixerLayer(config, i) for i in range(config.n_layers)]
        )
        self.norm_f = RMSNorm(config.d_model, config.norm_eps)

    def forward_parallel(
        self,
        hidden: Tensor,
        route: TaskRoute,
        chunk_len: Optional[int] = None,
    ) -> Tensor:
        out, _ = self.prefill(hidden, route, chunk_len)
        return out

    def prefill(
        self,
        hidden: Tensor,
        route: TaskRoute,
        chunk_len: Optional[int] = None,
    ) -> Tuple[Tensor, SsmDecodeState]:
        states: List[LayerState] = []
        for layer in self.layers:
            hidden, state = layer.forward_with_state(hidden, route, chunk_len)
            states.append(state)
        return self.norm_f(hidden), SsmDecodeState(tuple(states))

    def init_state(self, batch_size: int) -> SsmDecodeState:
        dtype = self.norm_f.weight.dtype
        return SsmDecodeState(
            tuple(
                layer.mixer.init_state(batch_size, dtype)
                for layer in self.layers
            )
        )

    def step(  # type: ignore[override]
        self, state: SsmDecodeState, hidden: Tensor, route: TaskRoute
    ) -> Tuple[SsmDecodeState, Tensor]:
        if len(state.layers) != len(self.layers):
            raise StateShapeError(
                -1, (len(self.layers),), (len(state.layers),)
            )
        states: List[LayerState] = []
        for layer, layer_state in zip(self.layers, state.layers):
            layer_state, hidden = layer.step(layer_state, hidden, route)
            states.append(layer_state)
        return SsmDecodeState(tuple(states)), self.norm_f(hidden)

    def forward_stepwise(self, hidden: Tensor, route: TaskRoute) -> Tensor:
        """Fold step over a (batch, length, d_model) sequence from a fresh
        state."""
        state = self.init_state(hidden.shape[0])
        outputs = []
        for t in range(hidden.shape[1]):
            state, out = self.step(state, hidden[:, t], route)
            outputs.append(out)
        return torch.stack(outputs, dim=1)

    def base_parameter_count(self) -> int:
        return backbone_param_count(self.config)

    def state_nbytes(self, batch_size: int = 1) -> int:
        """Closed form: (H*P*N + conv_dim*(d_conv-1)) * itemsize * layers."""
        c = self.config
        itemsize = self.norm_f.weight.element_size()
        per_layer = (
            c.n_heads * c.headdim * c.d_state + c.conv_dim * (c.d_conv - 1)
        )
        return per_layer * itemsize * c.n_layers * batch_size


def stack_forward(
    backbone: SsmBackbone,
    hidden: Tensor,
    route: TaskRoute,
    mode: str = "parallel",
) -> Tensor:
    if mode == "parallel":
        return backbone.forward_parallel(hidden, route)
    if mode == "step":
        return backbone.forward_stepwise(hidden, route)
    raise ValueError(f"unknown mode {mode!r}")


class NonFiniteActivationError(UniRouteError):
    def __init__(self, layer_idx: int) -> None:
        super().__init__(
            f"non-finite activation entering layer {layer_idx}",
            "NON_FINITE_ACTIVATION",
        )


class StateShapeError(UniRouteError):
    def __init__(self, layer_idx: int, expected: tuple, actual: tuple) -> None:
        super().__init__(
            f"layer {layer_idx}: decode state shape {actual} doesn't match "
            f"config {expected}",
            "STATE_SHAPE_MISMATCH",
        )
