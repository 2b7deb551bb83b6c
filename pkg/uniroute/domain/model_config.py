from __future__ import annotations

from dataclasses import dataclass

from uniroute.domain.exception import InvalidConfigError
from uniroute.domain.value_object import ValueObject

SPECIAL_TOKEN_COUNT = 6


@dataclass(frozen=True)
class ModelConfig(ValueObject):
    """Architectural hyperparameters shared by every module.

    Args:
        d_model: Embedding width.
        n_layers: Number of stacked mixer layers.
        d_state: Recurrent state width per head (N).
        headdim: Channels per head (P).
        n_heads: Number of SSM heads (H).
        expand: d_inner = expand * d_model = n_heads * headdim.
        d_conv: Width of the causal depthwise convolution.
        n_groups: Groups sharing B/C projections; divides n_heads.
        lora_rank: Rank of each task adapter, 0 disables every adapter.
        lora_alpha: Adapter scale numerator; the delta is multiplied by
            lora_alpha / lora_rank.
        d_vis: Width of the frozen vision features.
        chunk_len: Default chunk length of the parallel scan.
        shared_vocab: Fuse text, image and special tables into one table and
            one head (ablation).
    """

    d_model: int = 256
    n_layers: int = 8
    d_state: int = 16
    headdim: int = 64
    n_heads: int = 8
    expand: int = 2
    d_conv: int = 4
    n_groups: int = 1
    lora_rank: int = 8
    lora_alpha: float = 16.0
    text_vocab_size: int = 512
    image_vocab_size: int = 64
    special_token_count: int = SPECIAL_TOKEN_COUNT
    max_image_tokens: int = 16
    d_vis: int = 64
    chunk_len: int = 16
    norm_eps: float = 1e-5
    shared_vocab: bool = False

    def validate(self) -> None:
        positives = (
            "d_model",
            "n_layers",
            "d_state",
            "headdim",
            "n_heads",
            "expand",
            "d_conv",
            "n_groups",
            "text_vocab_size",
            "image_vocab_size",
            "special_token_count",
            "max_image_tokens",
            "d_vis",
            "chunk_len",
        )
        for name in positives:
            if getattr(self, name) <= 0:
                raise InvalidConfigError(f"{name} must be positive")
        if self.lora_rank < 0:
            raise InvalidConfigError("lora_rank must be non-negative")
        if self.expand * self.d_model != self.n_heads * self.headdim:
            raise InvalidConfigError(
                f"expand*d_model ({self.expand * self.d_model}) must equal "
                f"n_heads*headdim ({self.n_heads * self.headdim})"
            )
        if self.n_heads % self.n_groups != 0:
            raise InvalidConfigError(
                f"n_groups ({self.n_groups}) must divide "
                f"n_heads ({self.n_heads})"
            )
        if self.special_token_count != SPECIAL_TOKEN_COUNT:
            raise InvalidConfigError(
                f"special_token_count must be {SPECIAL_TOKEN_COUNT}"
            )
        if self.lora_rank > 0 and self.lora_alpha <= 0:
            raise InvalidConfigError("lora_alpha must be positive")

    def with_lora_rank(self, rank: int) -> ModelConfig:
        """Override the rank, keeping the alpha = 2r convention."""
        return self.evolve(lora_rank=rank, lora_alpha=float(2 * rank))

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def conv_dim(self) -> int:
        return self.d_inner + 2 * self.n_groups * self.d_state

    @property
    def d_in_proj(self) -> int:
        return (
            2 * self.d_inner
            + 2 * self.n_groups * self.d_state
            + self.n_heads
        )

    @property
    def text_outputs(self) -> int:
        """Text head width: the text table plus [EOT]."""
        return self.text_vocab_size + 1

    @property
    def image_outputs(self) -> int:
        """Image head width: the image table plus [EOI]."""
        return self.image_vocab_size + 1

    @property
    def fused_vocab_size(self) -> int:
        return (
            self.text_vocab_size
            + self.image_vocab_size
            + self.special_token_count
        )
