import pytest

from uniroute.data.toy import (
    CaptionGrammarError,
    Codebook,
    describe,
    detokenize,
    grammar_words,
    parse_caption,
    sample_example,
    tokenize_image,
)
from uniroute.domain.image import InvalidImageError, ToyImage
from uniroute.domain.token import Token, TokenRangeError


def grid_with(background, **cells):
    values = [background] * 16
    for key, color in cells.items():
        values[int(key[1:])] = color
    return ToyImage.from_cells(values)


class TestCaptions:
    @pytest.mark.parametrize(
        "image, caption",
        [
            (ToyImage.uniform(2), "uniform red"),
            (
                grid_with(0, c5=3),
                "black background with green cell at row 2 column 2",
            ),
            (
                grid_with(4, c0=1, c15=7),
                "blue background with white cell at row 1 column 1 "
                "and orange cell at row 4 column 4",
            ),
        ],
    )
    def test_describe(self, image, caption):
        assert describe(image) == caption
        assert parse_caption(caption) == image

    def test_sampled_captions_parse_back(self):
        for seed in range(200):
            image, caption = sample_example(seed)
            assert parse_caption(caption) == image

    def test_sampling_is_seeded(self):
        assert sample_example(11) == sample_example(11)

    def test_captions_stay_in_grammar(self):
        vocabulary = set(grammar_words())
        for seed in range(50):
            _, caption = sample_example(seed)
            assert set(caption.split()) <= vocabulary

    @pytest.mark.parametrize(
        "caption",
        [
            "",
            "uniform",
            "uniform red blue",
            "teal background with red cell at row 1 column 1",
            "red background with red cell at row 1 column 1",
            "red background with blue cell at row 5 column 1",
            "red background with blue cell at row 2 column 1 "
            "and blue cell at row 1 column 1",
            "red background blue cell at row 1 column 1",
        ],
    )
    def test_invalid_caption_raises(self, caption):
        with pytest.raises(CaptionGrammarError):
            parse_caption(caption)


class TestCodebook:
    def test_tokens_are_palette_indices(self):
        image = grid_with(6, c3=1)
        tokens = tokenize_image(image)

        assert tokens[3] == Token.image(1)
        assert detokenize(tokens) == image

    def test_out_of_codebook_code_raises(self):
        tokens = tokenize_image(ToyImage.uniform(0))
        tokens[4] = Token.image(8)

        with pytest.raises(TokenRangeError):
            detokenize(tokens)

    def test_wrong_length_raises(self):
        with pytest.raises(TokenRangeError):
            detokenize(tokenize_image(ToyImage.uniform(0))[:-1])

    def test_codebook_must_hold_palette(self):
        with pytest.raises(TokenRangeError):
            Codebook(image_vocab_size=4)


class TestToyImage:
    def test_render_marks_collisions(self):
        image = grid_with(0, c1=4)

        assert image.render().splitlines()[0] == "b B b b"

    @pytest.mark.parametrize("cells", [[0] * 15, [0] * 15 + [8]])
    def test_invalid_grid_raises(self, cells):
        with pytest.raises(InvalidImageError):
            ToyImage.from_cells(cells)
