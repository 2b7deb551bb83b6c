import torch

from uniroute.domain.image import ToyImage
from uniroute.domain.token import Modality, modality_code
from uniroute.model.vision import FrozenVisionEncoder

CHECKER = ToyImage.from_cells([0, 1] * 8)


class TestFrozenVisionEncoder:
    def test_table_ignores_the_global_seed(self):
        torch.manual_seed(1)
        first = FrozenVisionEncoder(8)
        torch.manual_seed(2)
        second = FrozenVisionEncoder(8)

        assert torch.equal(first(CHECKER), second(CHECKER))

    def test_features_follow_the_cells(self):
        encoder = FrozenVisionEncoder(8)
        features = encoder(CHECKER)

        assert features.shape == (16, 8)
        assert torch.equal(features[0], encoder.table[0, 0])
        assert torch.equal(features[1], encoder.table[1, 1])
        assert not torch.equal(features[0], features[2])

    def test_table_is_not_trainable(self):
        assert not FrozenVisionEncoder(8).table.requires_grad


class TestUnderstandingPath:
    def test_projection_to_model_width(self, tiny_model, tiny_config):
        projected = tiny_model.encode_for_understanding(CHECKER)

        assert projected.shape == (16, tiny_config.d_model)

    def test_embed_fills_feature_slots_with_projections(self, tiny_model):
        kinds = torch.full((1, 16), modality_code(Modality.FEATURE))
        ids = torch.zeros_like(kinds)
        features = tiny_model.encode_image(CHECKER).unsqueeze(0)

        with torch.no_grad():
            hidden = tiny_model.embed(kinds, ids, features)
            expected = tiny_model.encode_for_understanding(CHECKER)

        torch.testing.assert_close(hidden[0], expected)
