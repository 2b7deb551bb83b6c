import pytest
import torch

from uniroute.data.dataset import (
    ExampleBuilder,
    generate_dataset,
    sample_scenes,
    scene_records,
    toy_tokenizer,
)
from uniroute.domain.model_config import ModelConfig
from uniroute.domain.schedule import StageConfig
from uniroute.domain.task import Stage, TaskRoute
from uniroute.model.network import UniRouteModel

QUESTION = "describe the image"


@pytest.fixture
def tiny_config():
    return ModelConfig.create(
        d_model=16,
        n_layers=2,
        d_state=4,
        headdim=8,
        n_heads=4,
        expand=2,
        d_conv=4,
        lora_rank=2,
        lora_alpha=4.0,
        text_vocab_size=32,
        image_vocab_size=8,
        d_vis=8,
        chunk_len=4,
    )


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return UniRouteModel(tiny_config)


@pytest.fixture
def shared_model(tiny_config):
    torch.manual_seed(0)
    return UniRouteModel(tiny_config.evolve(shared_vocab=True))


@pytest.fixture(scope="session")
def tokenizer():
    return toy_tokenizer(QUESTION)


@pytest.fixture
def builder(tiny_model, tokenizer):
    return ExampleBuilder(
        tokenizer, tiny_model.encode_image, question=QUESTION
    )


@pytest.fixture(scope="session")
def records():
    return scene_records(sample_scenes(seed=0, count=8))


@pytest.fixture
def mmu_examples(builder, records):
    return [builder.mmu(r) for r in records if r.task is TaskRoute.MMU]


@pytest.fixture
def t2i_examples(builder, records):
    return [builder.t2i(r) for r in records if r.task is TaskRoute.T2I]


@pytest.fixture
def data_dir(tmp_path):
    directory = str(tmp_path / "data")
    generate_dataset(directory, 0, 12, 4, QUESTION)
    return directory


@pytest.fixture
def short_stage():
    def build(stage, **overrides):
        values = dict(
            peak_lr=1e-3,
            warmup_steps=1,
            total_steps=3,
            mmu_count=2 if stage in (Stage.MMU, Stage.UNIFIED) else 0,
            t2i_count=2 if stage in (Stage.T2I, Stage.UNIFIED) else 0,
            checkpoint_every=0,
        )
        if stage is Stage.LM:
            values["mmu_count"] = 2
        values.update(overrides)
        return StageConfig.create(stage=stage, **values)

    return build


@pytest.fixture
def debug_on(monkeypatch):
    monkeypatch.setenv("UNIROUTE_DEBUG", "True")


@pytest.fixture
def debug_off(monkeypatch):
    monkeypatch.setenv("UNIROUTE_DEBUG", "False")
