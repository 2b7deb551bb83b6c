"""Synthetic 4x4 color grids with an invertible caption grammar.

    caption    := "uniform" COLOR
                | COLOR "background with" clause ("and" clause)*
    clause     := COLOR "cell at row" DIGIT "column" DIGIT

Clauses follow raster order, rows and columns are 1-based, and a highlighted
cell never has the background color, so every caption names one grid.
"""
from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from uniroute.domain.exception import UniRouteError
from uniroute.domain.image import CELL_COUNT, GRID_SIZE, PALETTE, ToyImage
from uniroute.domain.token import Modality, Token, TokenRangeError

MAX_HIGHLIGHTS = 3
KEYWORDS = (
    "uniform",
    "background",
    "with",
    "cell",
    "at",
    "row",
    "column",
    "and",
)


def grammar_words() -> List[str]:
    digits = [str(i + 1) for i in range(GRID_SIZE)]
    return sorted(set(KEYWORDS) | set(PALETTE) | set(digits))


def sample_example(seed: int) -> Tuple[ToyImage, str]:
    rng = np.random.default_rng(seed)
    background = int(rng.integers(len(PALETTE)))
    highlights = int(rng.integers(MAX_HIGHLIGHTS + 1))
    cells = [background] * CELL_COUNT
    positions = sorted(
        int(p) for p in rng.choice(CELL_COUNT, size=highlights, replace=False)
    )
    others = [c for c in range(len(PALETTE)) if c != background]
    for position in positions:
        cells[position] = int(others[rng.integers(len(others))])
    image = ToyImage.from_cells(cells)
    return image, describe(image)


def describe(image: ToyImage) -> str:
    """Caption of a grid; the background is its most frequent color, ties
    going to the lowest index."""
    counts = np.bincount(np.asarray(image.cells), minlength=len(PALETTE))
    background = int(np.argmax(counts))
    if counts[background] == CELL_COUNT:
        return f"uniform {PALETTE[background]}"
    clauses = []
    for position, color in enumerate(image.cells):
        if color == background:
            continue
        row, column = divmod(position, GRID_SIZE)
        clauses.append(
            f"{PALETTE[color]} cell at row {row + 1} column {column + 1}"
        )
    return f"{PALETTE[background]} background with " + " and ".join(clauses)


def parse_caption(caption: str) -> ToyImage:
    words = caption.split()
    reader = _WordReader(words, caption)
    if reader.peek() == "uniform":
        reader.expect("uniform")
        color = reader.color()
        reader.end()
        return ToyImage.uniform(color)

    background = reader.color()
    reader.expect("background")
    reader.expect("with")
    cells = [background] * CELL_COUNT
    last = -1
    while True:
        color = reader.color()
        reader.expect("cell")
        reader.expect("at")
        reader.expect("row")
        row = reader.digit()
        reader.expect("column")
        column = reader.digit()
        position = row * GRID_SIZE + column
        if position <= last:
            raise CaptionGrammarError(caption, "clauses out of raster order")
        if color == background:
            raise CaptionGrammarError(caption, "highlight matches background")
        cells[position] = color
        last = position
        if reader.done():
            break
        reader.expect("and")
    return ToyImage.from_cells(cells)


class _WordReader:
    def __init__(self, words: Sequence[str], caption: str) -> None:
        self._words = words
        self._caption = caption
        self._cursor = 0

    def peek(self) -> str:
        if self._cursor >= len(self._words):
            raise CaptionGrammarError(self._caption, "unexpected end")
        return self._words[self._cursor]

    def _next(self) -> str:
        word = self.peek()
        self._cursor += 1
        return word

    def expect(self, keyword: str) -> None:
        word = self._next()
        if word != keyword:
            raise CaptionGrammarError(
                self._caption, f"expected {keyword!r}, got {word!r}"
            )

    def color(self) -> int:
        word = self._next()
        if word not in PALETTE:
            raise CaptionGrammarError(self._caption, f"{word!r} isn't a color")
        return PALETTE.index(word)

    def digit(self) -> int:
        word = self._next()
        if not word.isdigit() or not 1 <= int(word) <= GRID_SIZE:
            raise CaptionGrammarError(
                self._caption, f"{word!r} isn't a row or column"
            )
        return int(word) - 1

    def done(self) -> bool:
        return self._cursor == len(self._words)

    def end(self) -> None:
        if not self.done():
            raise CaptionGrammarError(
                self._caption, f"trailing words from {self.peek()!r}"
            )


class Codebook:
    """Identity map between palette colors and image-token ids."""

    def __init__(self, image_vocab_size: int = len(PALETTE)) -> None:
        if image_vocab_size < len(PALETTE):
            raise TokenRangeError(
                f"image vocabulary of {image_vocab_size} can't hold "
                f"{len(PALETTE)} colors"
            )
        self.size = image_vocab_size

    def encode(self, image: ToyImage) -> List[Token]:
        return [Token.image(color) for color in image.cells]

    def decode(self, tokens: Sequence[Token]) -> ToyImage:
        if len(tokens) != CELL_COUNT:
            raise TokenRangeError(
                f"{len(tokens)} image tokens, expected {CELL_COUNT}"
            )
        cells = []
        for token in tokens:
            if token.modality is not Modality.IMAGE:
                raise TokenRangeError(f"{token!r} isn't an image token")
            if token.id >= len(PALETTE):
                raise TokenRangeError(f"image code {token.id} not in codebook")
            cells.append(token.id)
        return ToyImage.from_cells(cells)


_CODEBOOK = Codebook()


def tokenize_image(image: ToyImage) -> List[Token]:
    return _CODEBOOK.encode(image)


def detokenize(tokens: Sequence[Token]) -> ToyImage:
    return _CODEBOOK.decode(tokens)


class CaptionGrammarError(UniRouteError):
    def __init__(self, caption: str, reason: str) -> None:
        super().__init__(
            f"{caption!r} doesn't parse: {reason}", "CAPTION_GRAMMAR_ERROR"
        )
