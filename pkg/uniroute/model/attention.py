"""Decoder-only causal self-attention stack with a key/value cache.

It plugs into `UniRouteModel` in place of the state space backbone, so the
two share embeddings, heads and sequence formats and differ only in the
sequence mixer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from uniroute.domain.exception import UniRouteError
from uniroute.domain.model_config import ModelConfig
from uniroute.domain.task import TaskRoute
from uniroute.domain.value_object import ValueObject
from uniroute.model.lora import backbone_param_count
from uniroute.model.ssm import RMSNorm
from uniroute.ports.backbone import AbstractBackbone, AbstractDecodeState

PARAM_TOLERANCE = 0.05
# Query positions per prefill pass; bounds the (queries, keys) score matrix.
PREFILL_CHUNK = 512


@dataclass(frozen=True)
class AttnConfig(ValueObject):
    """Shape of the attention baseline.

    Args:
        ffn_mult: Feed-forward width as a multiple of d_model.
        reference_params: Parameter count the stack must match within
            PARAM_TOLERANCE; 0 skips the check.
    """

    d_model: int
    n_layers: int
    n_heads: int
    ffn_mult: float
    norm_eps: float = 1e-5
    rope_base: float = 10000.0
    reference_params: int = 0

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ParamMismatchError(
                f"n_heads ({self.n_heads}) must divide "
                f"d_model ({self.d_model})"
            )
        if (self.d_model // self.n_heads) % 2:
            raise ParamMismatchError(
                "rotary embeddings need an even head size"
            )
        if self.ffn_hidden <= 0:
            raise ParamMismatchError("feed-forward width must be positive")
        if self.reference_params:
            gap = abs(self.parameter_count - self.reference_params)
            if gap > PARAM_TOLERANCE * self.reference_params:
                raise ParamMismatchError(
                    f"{self.parameter_count} parameters vs "
                    f"{self.reference_params} to match"
                )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_hidden(self) -> int:
        return int(round(self.ffn_mult * self.d_model))

    @property
    def parameter_count(self) -> int:
        d = self.d_model
        per_layer = 4 * d * d + 2 * d * self.ffn_hidden + 2 * d
        return per_layer * self.n_layers + d

    @classmethod
    def matched(cls, config: ModelConfig) -> AttnConfig:
        """Same width, depth and head count as the state space stack, with
        the feed-forward width picked to match its parameter count."""
        target = backbone_param_count(config)
        d = config.d_model
        per_layer = (target - d) / config.n_layers
        hidden = round((per_layer - 4 * d * d - 2 * d) / (2 * d))
        return cls.create(
            d_model=d,
            n_layers=config.n_layers,
            n_heads=_heads_for(d, config.n_heads),
            ffn_mult=hidden / d,
            norm_eps=config.norm_eps,
            reference_params=target,
        )


def _heads_for(d_model: int, preferred: int) -> int:
    for heads in range(min(preferred, d_model), 0, -1):
        if d_model % heads == 0 and (d_model // heads) % 2 == 0:
            return heads
    return 1


class KvCache(AbstractDecodeState):
    """Per-layer keys and values, (batch, heads, capacity, head_dim).

    Storage doubles when full. `nbytes` counts the occupied entries only,
    which is linear in `length`; `allocated_nbytes` counts the capacity.
    """

    def __init__(
        self,
        config: AttnConfig,
        batch_size: int,
        dtype: torch.dtype = torch.float32,
        capacity: int = 16,
    ) -> None:
        self.config = config
        self.batch_size = batch_size
        self.dtype = dtype
        self.length = 0
        shape = (batch_size, config.n_heads, capacity, config.head_dim)
        self.keys: List[Tensor] = [
            torch.zeros(shape, dtype=dtype) for _ in range(config.n_layers)
        ]
        self.values: List[Tensor] = [
            torch.zeros(shape, dtype=dtype) for _ in range(config.n_layers)
        ]

    @property
    def capacity(self) -> int:
        return self.keys[0].shape[2] if self.keys else 0

    @property
    def per_token_nbytes(self) -> int:
        itemsize = torch.empty(0, dtype=self.dtype).element_size()
        c = self.config
        per_layer = 2 * c.n_heads * c.head_dim * itemsize
        return per_layer * c.n_layers * self.batch_size

    @property
    def nbytes(self) -> int:
        return self.length * self.per_token_nbytes

    @property
    def allocated_nbytes(self) -> int:
        return self.capacity * self.per_token_nbytes

    def reserve(self, extra: int) -> None:
        needed = self.length + extra
        if needed <= self.capacity:
            return
        capacity = max(self.capacity, 1)
        while capacity < needed:
            capacity *= 2
        for store in (self.keys, self.values):
            for i, old in enumerate(store):
                grown = old.new_zeros(
                    old.shape[0], old.shape[1], capacity, old.shape[3]
                )
                grown[:, :, : self.length] = old[:, :, : self.length]
                store[i] = grown

    def write(
        self, layer: int, start: int, key: Tensor, value: Tensor
    ) -> None:
        end = start + key.shape[2]
        self.keys[layer][:, :, start:end] = key
        self.values[layer][:, :, start:end] = value

    def view(self, layer: int, end: int) -> Tuple[Tensor, Tensor]:
        return self.keys[layer][:, :, :end], self.values[layer][:, :, :end]


def rotary(x: Tensor, positions: Tensor, base: float) -> Tensor:
    """Rotate (batch, heads, length, head_dim) pairs by position."""
    half = x.shape[-1] // 2
    inv_freq = base ** (
        -torch.arange(half, dtype=x.dtype, device=x.device) / half
    )
    angles = positions.to(x.dtype)[:, None] * inv_freq[None, :]
    cos, sin = angles.cos(), angles.sin()
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class CausalSelfAttention(nn.Module):
    def __init__(self, config: AttnConfig, layer_idx: int) -> None:
        super().__init__()
        self.config = config
        self.layer_idx = layer_idx
        self.qkv = nn.Linear(config.d_model, 3 * config.d_model, bias=False)
        self.out = nn.Linear(config.d_model, config.d_model, bias=False)

    def forward(self, hidden: Tensor, cache: KvCache, start: int) -> Tensor:
        """Attend positions start.. of `hidden` over the cache, writing
        their keys and values into it first."""
        c = self.config
        q, k, v = rearrange(
            self.qkv(hidden),
            "b l (three h d) -> three b h l d",
            three=3,
            h=c.n_heads,
        )
        positions = torch.arange(start, start + hidden.shape[1])
        q = rotary(q, positions, c.rope_base)
        k = rotary(k, positions, c.rope_base)
        cache.write(self.layer_idx, start, k, v)
        end = start + hidden.shape[1]
        keys, values = cache.view(self.layer_idx, end)
        visible = torch.arange(end)[None, :] <= positions[:, None]
        y = F.scaled_dot_product_attention(q, keys, values, attn_mask=visible)
        return self.out(rearrange(y, "b h l d -> b l (h d)"))


class FeedForward(nn.Module):
    def __init__(self, config: AttnConfig) -> None:
        super().__init__()
        self.up = nn.Linear(config.d_model, config.ffn_hidden, bias=False)
        self.down = nn.Linear(config.ffn_hidden, config.d_model, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(F.silu(self.up(x)))


class AttnLayer(nn.Module):
    def __init__(self, config: AttnConfig, layer_idx: int) -> None:
        super().__init__()
        self.norm_attn = RMSNorm(config.d_model, config.norm_eps)
        self.attn = CausalSelfAttention(config, layer_idx)
        self.norm_ffn = RMSNorm(config.d_model, config.norm_eps)
        self.ffn = FeedForward(config)

    def forward(self, hidden: Tensor, cache: KvCache, start: int) -> Tensor:
        hidden = hidden + self.attn(self.norm_attn(hidden), cache, start)
        return hidden + self.ffn(self.norm_ffn(hidden))


class AttentionBackbone(AbstractBackbone):
    """Task routes are accepted and ignored: the baseline has no adapters."""

    def __init__(self, config: AttnConfig) -> None:
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(
            [AttnLayer(config, i) for i in range(config.n_layers)]
        )
        self.norm_f = RMSNorm(config.d_model, config.norm_eps)

    def _advance(self, cache: KvCache, hidden: Tensor) -> Tensor:
        if hidden.shape[0] != cache.batch_size:
            raise CacheShapeError(
                f"batch of {hidden.shape[0]} for a cache of "
                f"{cache.batch_size}"
            )
        start = cache.length
        cache.reserve(hidden.shape[1])
        for layer in self.layers:
            hidden = layer(hidden, cache, start)
        cache.length = start + hidden.shape[1]
        return self.norm_f(hidden)

    def forward_parallel(
        self,
        hidden: Tensor,
        route: TaskRoute = TaskRoute.NONE,
        chunk_len: Optional[int] = None,
    ) -> Tensor:
        out, _ = self.prefill(hidden, route, chunk_len)
        return out

    def prefill(
        self,
        hidden: Tensor,
        route: TaskRoute = TaskRoute.NONE,
        chunk_len: Optional[int] = None,
    ) -> Tuple[Tensor, KvCache]:
        """Causal pass over (batch, length, d_model), chunk_len query
        positions at a time."""
        cache = self.init_state(hidden.shape[0])
        cache.reserve(hidden.shape[1])
        chunk_len = chunk_len or PREFILL_CHUNK
        outputs = [
            self._advance(cache, hidden[:, start : start + chunk_len])
            for start in range(0, hidden.shape[1], chunk_len)
        ]
        return torch.cat(outputs, dim=1), cache

    def init_state(self, batch_size: int) -> KvCache:
        return KvCache(self.config, batch_size, self.norm_f.weight.dtype)

    def step(  # type: ignore[override]
        self,
        state: KvCache,
        hidden: Tensor,
        route: TaskRoute = TaskRoute.NONE,
    ) -> Tuple[KvCache, Tensor]:
        if hidden.ndim != 2 or hidden.shape[-1] != self.config.d_model:
            raise CacheShapeError(
                f"step input {tuple(hidden.shape)}, expected "
                f"(batch, {self.config.d_model})"
            )
        out = self._advance(state, hidden.unsqueeze(1))
        return state, out[:, 0]

    def base_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def attn_step(
    backbone: AttentionBackbone, cache: KvCache, hidden: Tensor
) -> Tuple[KvCache, Tensor]:
    return backbone.step(cache, hidden)


class ParamMismatchError(UniRouteError):
    def __init__(self, message: str) -> None:
        super().__init__(message, "PARAM_MISMATCH")


class CacheShapeError(UniRouteError):
    def __init__(self, message: str) -> None:
        super().__init__(message, "CACHE_SHAPE_MISMATCH")
