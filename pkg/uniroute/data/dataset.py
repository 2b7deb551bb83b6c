"""Line-delimited dataset records and their conversion to examples.

Each line is a flat JSON object `{"task": ..., "grid": [16 ints],
"caption": ...}`.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Set, Tuple

import numpy as np
from torch import Tensor

from uniroute.data.sequence import (
    build_lm_sequence,
    build_mmu_sequence,
    build_t2i_sequence,
)
from uniroute.data.tokenizer import WordTokenizer
from uniroute.data.toy import grammar_words, sample_example, tokenize_image
from uniroute.domain.exception import UniRouteError
from uniroute.domain.image import InvalidImageError, ToyImage
from uniroute.domain.stream import TrainingExample
from uniroute.domain.task import TaskRoute
from uniroute.domain.token import Token
from uniroute.domain.value_object import ValueObject
from uniroute.utils.serializer import json_dumps

logger = logging.getLogger(__name__)

TRAIN_FILE = "train.jsonl"
VAL_FILE = "val.jsonl"
VOCAB_FILE = "vocab.txt"
TASKS = (TaskRoute.MMU, TaskRoute.T2I)


@dataclass(frozen=True)
class Record(ValueObject):
    task: TaskRoute
    grid: ToyImage
    caption: str

    def validate(self) -> None:
        if self.task not in TASKS:
            raise DatasetFormatError(f"task {self.task.value!r} has no data")
        if not self.caption.split():
            raise DatasetFormatError("empty caption")

    def to_json(self) -> str:
        return json_dumps(
            {
                "task": self.task,
                "grid": list(self.grid.cells),
                "caption": self.caption,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> Record:
        try:
            raw = json.loads(line)
            return cls.create(
                task=TaskRoute(raw["task"]),
                grid=ToyImage.from_cells(raw["grid"]),
                caption=str(raw["caption"]),
            )
        except (KeyError, TypeError, ValueError, InvalidImageError) as error:
            raise DatasetFormatError(f"bad record {line.strip()!r}") from error


def sample_scenes(
    seed: int, count: int, exclude: Optional[Set[Tuple[int, ...]]] = None
) -> List[Tuple[ToyImage, str]]:
    """`count` distinct scenes whose grids aren't in `exclude`."""
    rng = np.random.default_rng(seed)
    seen = set(exclude or ())
    scenes = []
    while len(scenes) < count:
        image, caption = sample_example(int(rng.integers(2**31)))
        if image.cells in seen:
            continue
        seen.add(image.cells)
        scenes.append((image, caption))
    return scenes


def scene_records(scenes: Iterable[Tuple[ToyImage, str]]) -> List[Record]:
    """One record per task for every scene."""
    return [
        Record.create(task=task, grid=image, caption=caption)
        for image, caption in scenes
        for task in TASKS
    ]


def write_records(path: str, records: Iterable[Record]) -> int:
    written = 0
    with open(path, "w", encoding="utf-8", newline="\n") as stream:
        for record in records:
            stream.write(record.to_json() + "\n")
            written += 1
    return written


def read_records(path: str) -> List[Record]:
    if not os.path.exists(path):
        raise DatasetFormatError(f"{path} doesn't exist")
    with open(path, encoding="utf-8") as stream:
        return [Record.from_json(line) for line in stream if line.strip()]


def toy_tokenizer(question: str) -> WordTokenizer:
    return WordTokenizer(grammar_words() + question.split())


def generate_dataset(
    out_dir: str, seed: int, train_count: int, val_count: int, question: str
) -> Tuple[int, int]:
    """Write train/val record files and the vocabulary; validation grids
    never appear in the training file."""
    os.makedirs(out_dir, exist_ok=True)
    train = sample_scenes(seed, train_count)
    val = sample_scenes(
        seed + 1, val_count, exclude={image.cells for image, _ in train}
    )
    n_train = write_records(
        os.path.join(out_dir, TRAIN_FILE), scene_records(train)
    )
    n_val = write_records(os.path.join(out_dir, VAL_FILE), scene_records(val))
    toy_tokenizer(question).save(os.path.join(out_dir, VOCAB_FILE))
    logger.info(
        "Wrote %s train and %s val records to %s", n_train, n_val, out_dir
    )
    return n_train, n_val


class ExampleBuilder:
    """Turn records into training examples of the matching layout."""

    def __init__(
        self,
        tokenizer: WordTokenizer,
        encode_image: Callable[[ToyImage], Tensor],
        question: str = "describe the image",
        max_image_tokens: int = 16,
        supervise_prompt: bool = False,
    ) -> None:
        self.tokenizer = tokenizer
        self.encode_image = encode_image
        self.question = question
        self.max_image_tokens = max_image_tokens
        self.supervise_prompt = supervise_prompt

    def text(self, text: str) -> List[Token]:
        return [Token.text(i) for i in self.tokenizer.encode(text)]

    def mmu(self, record: Record) -> TrainingExample:
        return build_mmu_sequence(
            self.encode_image(record.grid),
            self.text(self.question),
            self.text(record.caption),
            supervise_prompt=self.supervise_prompt,
        )

    def t2i(self, record: Record) -> TrainingExample:
        return build_t2i_sequence(
            self.text(record.caption),
            tokenize_image(record.grid),
            self.max_image_tokens,
            supervise_prompt=self.supervise_prompt,
        )

    def lm(self, record: Record) -> TrainingExample:
        return build_lm_sequence(self.text(record.caption))

    def build(self, record: Record) -> TrainingExample:
        if record.task is TaskRoute.MMU:
            return self.mmu(record)
        return self.t2i(record)


class DatasetFormatError(UniRouteError):
    def __init__(self, message: str) -> None:
        super().__init__(message, "DATASET_FORMAT_ERROR")
