from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

from uniroute.domain.exception import UniRouteError
from uniroute.domain.value_object import ValueObject

GRID_SIZE = 4
CELL_COUNT = GRID_SIZE * GRID_SIZE
PALETTE: Tuple[str, ...] = (
    "black",
    "white",
    "red",
    "green",
    "blue",
    "yellow",
    "purple",
    "orange",
)


@dataclass(frozen=True)
class ToyImage(ValueObject):
    """A 4x4 grid of palette indices in raster order."""

    cells: Tuple[int, ...]

    def validate(self) -> None:
        if len(self.cells) != CELL_COUNT:
            raise InvalidImageError(
                f"grid has {len(self.cells)} cells, expected {CELL_COUNT}"
            )
        for cell in self.cells:
            if not 0 <= cell < len(PALETTE):
                raise InvalidImageError(f"color index {cell} not in palette")

    @classmethod
    def from_cells(cls, cells: Sequence[int]) -> ToyImage:
        return cls.create(cells=tuple(int(c) for c in cells))

    @classmethod
    def uniform(cls, color: int) -> ToyImage:
        return cls.from_cells([color] * CELL_COUNT)

    def at(self, row: int, column: int) -> int:
        return self.cells[row * GRID_SIZE + column]

    def render(self) -> str:
        """Text-art picture, one letter per cell (first letter of the color,
        upper-cased when it would collide)."""
        glyphs = {i: _glyph(i) for i in range(len(PALETTE))}
        rows = []
        for r in range(GRID_SIZE):
            row = self.cells[r * GRID_SIZE : (r + 1) * GRID_SIZE]
            rows.append(" ".join(glyphs[c] for c in row))
        return "\n".join(rows)


def _glyph(index: int) -> str:
    name = PALETTE[index]
    earlier = [PALETTE[i][0] for i in range(index)]
    return name[0].upper() if name[0] in earlier else name[0]


class InvalidImageError(UniRouteError):
    def __init__(self, message: str) -> None:
        super().__init__(message, "INVALID_IMAGE")
