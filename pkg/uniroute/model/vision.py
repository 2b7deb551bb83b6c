from __future__ import annotations

import torch
from torch import Tensor, nn

from uniroute.domain.image import CELL_COUNT, PALETTE, ToyImage

ENCODER_SEED = 20_240_601


class FrozenVisionEncoder(nn.Module):
    """Fixed random (cell position, color) -> d_vis feature table.

    The table is drawn from its own generator, so every model built with the
    same d_vis carries the same encoder whatever the global seed.
    """

    def __init__(self, d_vis: int) -> None:
        super().__init__()
        generator = torch.Generator().manual_seed(ENCODER_SEED)
        table = torch.randn(
            CELL_COUNT, len(PALETTE), d_vis, generator=generator
        )
        self.table = nn.Parameter(table, requires_grad=False)

    def forward(self, image: ToyImage) -> Tensor:
        """(16, d_vis) features, one per cell in raster order."""
        cells = torch.tensor(image.cells, dtype=torch.long)
        return self.table[torch.arange(CELL_COUNT), cells].detach()


class VisualProjector(nn.Linear):
    """Trainable d_vis -> d_model map applied per feature vector."""

    def __init__(self, d_vis: int, d_model: int) -> None:
        super().__init__(d_vis, d_model, bias=True)
