import os

import pytest

from uniroute.data.dataset import (
    TRAIN_FILE,
    VAL_FILE,
    VOCAB_FILE,
    DatasetFormatError,
    Record,
    read_records,
    sample_scenes,
    scene_records,
    write_records,
)
from uniroute.data.tokenizer import WordTokenizer
from uniroute.data.toy import parse_caption
from uniroute.domain.image import ToyImage
from uniroute.domain.task import TaskRoute


class TestRecords:
    def test_json_line_round_trip(self):
        record = Record.create(
            task=TaskRoute.T2I,
            grid=ToyImage.uniform(3),
            caption="uniform green",
        )
        line = record.to_json()

        assert '"task": "t2i"' in line
        assert Record.from_json(line) == record

    @pytest.mark.parametrize(
        "line",
        [
            "not json",
            '{"task": "mmu", "grid": [0], "caption": "uniform black"}',
            '{"task": "none", "grid": [0], "caption": "x"}',
            '{"grid": [' + ", ".join(["0"] * 16) + '], "caption": "x"}',
        ],
    )
    def test_bad_lines_raise(self, line):
        with pytest.raises(DatasetFormatError):
            Record.from_json(line)

    def test_each_scene_yields_both_tasks(self):
        records = scene_records(sample_scenes(seed=3, count=5))

        assert len(records) == 10
        assert [r.task for r in records[:2]] == [TaskRoute.MMU, TaskRoute.T2I]
        for record in records:
            assert parse_caption(record.caption) == record.grid

    def test_scenes_are_distinct_and_respect_exclusions(self):
        first = sample_scenes(seed=0, count=30)
        grids = {image.cells for image, _ in first}
        second = sample_scenes(seed=1, count=30, exclude=grids)

        assert len(grids) == 30
        assert not grids & {image.cells for image, _ in second}

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            read_records(str(tmp_path / "absent.jsonl"))

    def test_write_then_read(self, tmp_path, records):
        path = str(tmp_path / "records.jsonl")

        assert write_records(path, records) == len(records)
        assert read_records(path) == records


class TestGeneratedDataset:
    def test_layout_on_disk(self, data_dir):
        assert sorted(os.listdir(data_dir)) == sorted(
            [TRAIN_FILE, VAL_FILE, VOCAB_FILE]
        )
        assert len(read_records(os.path.join(data_dir, TRAIN_FILE))) == 24
        assert len(read_records(os.path.join(data_dir, VAL_FILE))) == 8

    def test_val_grids_never_in_train(self, data_dir):
        train = read_records(os.path.join(data_dir, TRAIN_FILE))
        val = read_records(os.path.join(data_dir, VAL_FILE))

        assert not {r.grid for r in train} & {r.grid for r in val}

    def test_vocabulary_covers_captions(self, data_dir):
        tokenizer = WordTokenizer.load(os.path.join(data_dir, VOCAB_FILE))
        for record in read_records(os.path.join(data_dir, TRAIN_FILE)):
            tokenizer.encode(record.caption)


class TestExampleBuilder:
    def test_routes_follow_tasks(self, builder, records):
        for record in records:
            assert builder.build(record).route is record.task

    def test_mmu_features_come_from_the_frozen_encoder(
        self, builder, records, tiny_model
    ):
        record = records[0]
        example = builder.mmu(record)

        assert example.visual_features.shape == (16, 8)
        assert example.visual_features.equal(
            tiny_model.encode_image(record.grid)
        )

    def test_lm_example_uses_the_caption(self, builder, records):
        example = builder.lm(records[0])

        assert example.route is TaskRoute.NONE
        assert len(example.stream) == len(records[0].caption.split()) + 2
