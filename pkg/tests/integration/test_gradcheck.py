import pytest
import torch

from uniroute.data.dataset import ExampleBuilder
from uniroute.domain.task import TaskRoute
from uniroute.model.network import UniRouteModel
from uniroute.training.engine import unified_step
from uniroute.training.freeze import FreezeGroup
from uniroute.training.gradcheck import finite_difference_check


@pytest.fixture
def double_model(tiny_config):
    torch.manual_seed(0)
    model = UniRouteModel(tiny_config).double()
    with torch.no_grad():
        for name, parameter in model.named_parameters():
            if ".adapters." in name and name.endswith(".up"):
                parameter.normal_(0.0, 0.1)
    return model


def test_autograd_matches_finite_differences(
    double_model, tokenizer, records
):
    builder = ExampleBuilder(tokenizer, double_model.encode_image)
    mmu = [builder.mmu(r) for r in records if r.task is TaskRoute.MMU][:2]
    t2i = [builder.t2i(r) for r in records if r.task is TaskRoute.T2I][:2]

    def loss_fn():
        return unified_step(double_model, mmu, t2i, backward=False).total

    results = finite_difference_check(double_model, loss_fn, eps=1e-5)
    checked = {result.group for result in results}

    assert checked == set(FreezeGroup) - {FreezeGroup.FROZEN_VISION_ENCODER}
    for result in results:
        assert result.relative_error <= 1e-4, result
