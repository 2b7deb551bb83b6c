import csv

import pytest

from uniroute.bench import (
    BENCH_COLUMNS,
    IMAGES_COLUMNS,
    BenchConfigError,
    bench_images,
    bench_pair,
    matched_models,
    positioned_session,
    time_per_token,
    write_bench,
    write_images,
)
from uniroute.domain.model_config import ModelConfig
from uniroute.model.attention import PARAM_TOLERANCE


@pytest.fixture(scope="module")
def rows():
    config = ModelConfig.create(
        d_model=16,
        n_layers=2,
        d_state=4,
        headdim=8,
        n_heads=4,
        text_vocab_size=32,
        image_vocab_size=8,
        d_vis=8,
    )
    return config, bench_pair([4, 16, 8], reps=5, config=config)


class TestBenchPair:
    def test_rows_follow_sorted_lengths(self, rows):
        _, table = rows

        assert [row.seq_len for row in table] == [4, 8, 16]
        assert all(row.ssm_tok_per_s > 0 for row in table)
        assert all(row.attn_tok_per_s > 0 for row in table)

    def test_ssm_state_bytes_are_constant(self, rows):
        _, table = rows

        assert len({row.ssm_state_bytes for row in table}) == 1

    def test_attention_cache_bytes_follow_closed_form(self, rows):
        config, table = rows
        _, attn = matched_models(config)
        attn_config = attn.backbone.config
        per_token = 2 * attn_config.n_layers * attn_config.d_model * 4

        for row in table:
            assert row.attn_cache_bytes == row.seq_len * per_token
        assert all(
            a.attn_cache_bytes < b.attn_cache_bytes
            for a, b in zip(table, table[1:])
        )

    def test_allocated_cache_covers_occupied_entries(self, rows):
        _, table = rows

        for row in table:
            assert row.attn_cache_alloc_bytes >= row.attn_cache_bytes
            per_token = row.attn_cache_bytes // row.seq_len
            assert row.attn_cache_alloc_bytes % per_token == 0

    def test_models_are_matched(self, rows):
        config, _ = rows
        ssm, attn = matched_models(config)
        ssm_params = ssm.backbone.base_parameter_count()
        attn_params = attn.backbone.base_parameter_count()

        assert abs(ssm_params - attn_params) <= PARAM_TOLERANCE * ssm_params
        assert not ssm.training and not attn.training

    @pytest.mark.parametrize("lens", [[], [0, 4], [-2]])
    def test_bad_lengths_raise(self, lens):
        with pytest.raises(BenchConfigError):
            bench_pair(lens)

    def test_timing_uses_at_least_five_reps(self, rows):
        config, _ = rows
        ssm, _ = matched_models(config)
        session = positioned_session(ssm, 4)
        start = session.position

        assert time_per_token(session, reps=1) > 0
        assert session.position - start >= 2 + 5


class TestTables:
    def test_bench_table(self, rows, tmp_path):
        _, table = rows
        path = write_bench(str(tmp_path / "bench.tsv"), table)

        with open(path, newline="") as stream:
            lines = list(csv.reader(stream, delimiter="\t"))
        assert tuple(lines[0]) == BENCH_COLUMNS
        assert [int(line[0]) for line in lines[1:]] == [4, 8, 16]

    def test_images_table(self, rows, tmp_path):
        config, _ = rows
        results = bench_images(2, config)
        path = write_images(str(tmp_path / "images.tsv"), results)

        with open(path, newline="") as stream:
            lines = list(csv.reader(stream, delimiter="\t"))
        assert tuple(lines[0]) == IMAGES_COLUMNS
        assert [line[0] for line in lines[1:]] == ["ssm", "attention"]
        assert all(r.images_per_s > 0 for r in results)

    def test_image_count_must_be_positive(self):
        with pytest.raises(BenchConfigError):
            bench_images(0)


@pytest.mark.slow
def test_decode_time_trend_at_desk_scale():
    short, long = bench_pair([256, 4096], reps=7)

    ssm_ratio = short.ssm_tok_per_s / long.ssm_tok_per_s
    attn_ratio = short.attn_tok_per_s / long.attn_tok_per_s
    assert ssm_ratio <= 1.5
    assert attn_ratio >= 2.0
    assert short.ssm_state_bytes == long.ssm_state_bytes
