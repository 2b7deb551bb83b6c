from __future__ import annotations

from typing import Optional

import torch
from torch import Tensor, nn

from uniroute.data.sequence import Batch
from uniroute.domain.image import ToyImage
from uniroute.domain.model_config import ModelConfig
from uniroute.domain.stream import LayoutError
from uniroute.domain.token import Modality, Token, modality_code
from uniroute.model.ssm import SsmBackbone
from uniroute.model.vision import FrozenVisionEncoder, VisualProjector
from uniroute.model.vocab import VocabHeads
from uniroute.ports.backbone import AbstractBackbone

FEATURE = modality_code(Modality.FEATURE)


class UniRouteModel(nn.Module):
    """Embeddings, a sequence mixer stack, and the vocabulary heads.

    Parameter names start with `backbone.`, `vocab.`, `projector.` or
    `vision_encoder.`; checkpoints and freeze groups rely on them.
    """

    def __init__(
        self,
        config: ModelConfig,
        backbone: Optional[AbstractBackbone] = None,
    ) -> None:
        super().__init__()
        self.config = config
        if backbone is None:
            backbone = SsmBackbone(config)
        self.backbone = backbone
        self.vocab = VocabHeads(config)
        self.projector = VisualProjector(config.d_vis, config.d_model)
        self.vision_encoder = FrozenVisionEncoder(config.d_vis)

    def encode_image(self, image: ToyImage) -> Tensor:
        """Frozen (16, d_vis) features; projection happens in `embed`."""
        return self.vision_encoder(image).to(self.projector.weight.dtype)

    def encode_for_understanding(self, image: ToyImage) -> Tensor:
        """(16, d_model) projected features, the MMU image segment."""
        return self.projector(self.encode_image(image))

    def embed(
        self, kinds: Tensor, ids: Tensor, features: Optional[Tensor] = None
    ) -> Tensor:
        hidden = self.vocab.embed_batch(kinds, ids)
        slots = kinds == FEATURE
        if features is not None and slots.any():
            projected = self.projector(features)
            hidden = torch.where(slots.unsqueeze(-1), projected, hidden)
        return hidden

    def embed_token(
        self, token: Token, features: Optional[Tensor] = None
    ) -> Tensor:
        """(1, d_model) input vector of a single token."""
        if token.modality is Modality.FEATURE:
            if features is None:
                raise LayoutError("feature token without features")
            return self.projector(features[token.id]).unsqueeze(0)
        return self.vocab.embed(token).unsqueeze(0)

    def hidden_states(self, batch: Batch) -> Tensor:
        """Final normalized hidden states of the batch inputs."""
        hidden = self.embed(batch.input_kinds, batch.input_ids, batch.features)
        return self.backbone.forward_parallel(hidden, batch.route)

    def forward(self, batch: Batch) -> Tensor:
        return self.hidden_states(batch)

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)
