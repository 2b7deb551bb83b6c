import pytest
import torch

from uniroute.data.dataset import Record
from uniroute.data.sequence import build_lm_sequence, mmu_prompt, t2i_prompt
from uniroute.data.toy import describe
from uniroute.domain.generation import DecodeMode, GenerationConfig
from uniroute.domain.image import PALETTE, ToyImage
from uniroute.domain.stream import LayoutError, TrainingExample
from uniroute.domain.task import TaskRoute
from uniroute.domain.token import Modality, Token
from uniroute.inference.evaluate import evaluate
from uniroute.inference.generate import (
    decode_image,
    decode_text,
    generate_image,
    generate_text,
)
from uniroute.inference.session import prefill

QUESTION = "describe the image"
SAMPLED = GenerationConfig.create(mode=DecodeMode.SAMPLED, top_k=4, seed=3)


@pytest.fixture
def caption_tokens(tokenizer):
    return [Token.text(i) for i in tokenizer.encode("uniform red")]


@pytest.fixture
def question_tokens(tokenizer):
    return [Token.text(i) for i in tokenizer.encode(QUESTION)]


class TestPrefill:
    def test_parallel_and_step_prefill_agree(
        self, tiny_model, question_tokens
    ):
        image = ToyImage.uniform(4)
        prompt = mmu_prompt(tiny_model.encode_image(image), question_tokens)

        parallel = prefill(tiny_model, prompt, mode="parallel")
        stepped = prefill(tiny_model, prompt, mode="step")

        assert parallel.position == stepped.position == len(prompt.stream)
        torch.testing.assert_close(
            parallel.hidden, stepped.hidden, rtol=1e-4, atol=1e-5
        )

    def test_session_state_is_constant_size(self, tiny_model, caption_tokens):
        session = prefill(tiny_model, t2i_prompt(caption_tokens))
        size = session.nbytes
        for i in range(10):
            session.feed(Token.image(i % 8))

        assert session.nbytes == size

    def test_route_mismatch_raises(self, tiny_model, caption_tokens):
        stream = t2i_prompt(caption_tokens).stream
        mislabeled = TrainingExample(TaskRoute.NONE, stream)

        with pytest.raises(LayoutError):
            prefill(tiny_model, mislabeled)

    def test_unknown_mode_raises(self, tiny_model, caption_tokens):
        with pytest.raises(ValueError):
            prefill(tiny_model, t2i_prompt(caption_tokens), mode="scan")

    def test_complete_text_stream_is_accepted(
        self, tiny_model, caption_tokens
    ):
        session = prefill(tiny_model, build_lm_sequence(caption_tokens))

        assert session.route is TaskRoute.NONE


class TestGeneration:
    @pytest.mark.parametrize("config", [None, SAMPLED])
    def test_image_tokens_only_in_image_segment(
        self, tiny_model, caption_tokens, config
    ):
        generated = decode_image(
            tiny_model, t2i_prompt(caption_tokens), config
        )

        assert len(generated.tokens) == 16
        assert all(t.modality is Modality.IMAGE for t in generated.tokens)
        assert generated.cross_modal_tokens == 0
        assert isinstance(generated.image(), ToyImage)

    @pytest.mark.parametrize("config", [None, SAMPLED])
    def test_text_tokens_only_in_text_segment(
        self, tiny_model, question_tokens, config
    ):
        prompt = mmu_prompt(
            tiny_model.encode_image(ToyImage.uniform(1)), question_tokens
        )
        generated = decode_text(tiny_model, prompt, config)

        assert len(generated.tokens) <= GenerationConfig().max_new_tokens
        assert all(t.modality is Modality.TEXT for t in generated.tokens)

    def test_sampling_is_seeded(self, tiny_model, caption_tokens):
        first = decode_image(tiny_model, t2i_prompt(caption_tokens), SAMPLED)
        second = decode_image(tiny_model, t2i_prompt(caption_tokens), SAMPLED)

        assert first.tokens == second.tokens

    def test_shared_vocab_cross_modal_tokens_are_counted(
        self, shared_model, caption_tokens
    ):
        with torch.no_grad():
            shared_model.backbone.norm_f.weight.zero_()
        generated = decode_image(shared_model, t2i_prompt(caption_tokens))

        assert generated.cross_modal_tokens == 16
        assert generated.image() == ToyImage.uniform(0)

    def test_string_level_helpers(self, tiny_model, tokenizer):
        image = generate_image(tiny_model, tokenizer, "uniform red")
        caption = generate_text(
            tiny_model, tokenizer, ToyImage.uniform(3), QUESTION
        )

        assert len(image.cells) == 16
        for word in caption.split():
            assert word in tokenizer or word.startswith("<#")


class TestEvaluate:
    def test_counts_every_record(self, tiny_model, tokenizer, records):
        report = evaluate(
            tiny_model, tokenizer, records[:6], question=QUESTION
        )

        assert report.mmu_total == 3
        assert report.t2i_total == 3
        assert 0.0 <= report.mmu_accuracy <= 1.0
        assert report.cross_modal_tokens == 0
        assert set(report.summary()) == {
            "mmu_accuracy",
            "t2i_accuracy",
            "mmu_total",
            "t2i_total",
            "cross_modal_tokens",
            "invalid_images",
        }

    def test_silenced_model_draws_black_grids(self, tiny_model, tokenizer):
        with torch.no_grad():
            tiny_model.backbone.norm_f.weight.zero_()
        record = Record.create(
            task=TaskRoute.T2I,
            grid=ToyImage.uniform(0),
            caption=describe(ToyImage.uniform(0)),
        )
        report = evaluate(tiny_model, tokenizer, [record], question=QUESTION)

        assert record.caption == f"uniform {PALETTE[0]}"
        assert report.t2i_correct == 1
