import pytest
import torch
import torch.nn.functional as F

from uniroute.domain.model_config import ModelConfig
from uniroute.domain.task import TaskRoute
from uniroute.model.ssm import (
    LayerState,
    Mamba2Block,
    NonFiniteActivationError,
    SsmBackbone,
    SsmDecodeState,
    StateShapeError,
    stack_forward,
)


@pytest.fixture
def block(tiny_config):
    torch.manual_seed(1)
    return Mamba2Block(tiny_config).double()


@pytest.fixture
def backbone(tiny_config):
    torch.manual_seed(2)
    return SsmBackbone(tiny_config).double()


def randomize_adapters(module):
    with torch.no_grad():
        for name, parameter in module.named_parameters():
            if ".adapters." in name and name.endswith(".up"):
                parameter.normal_(0.0, 0.1)


def hidden(batch, length, d_model, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(
        batch, length, d_model, generator=generator, dtype=torch.float64
    )


def block_oracle(block, x, route):
    """Position-by-position O(L^2) evaluation of one block, one B/C group."""
    c = block.config
    batch, length, _ = x.shape
    z, xbc, dt_raw = torch.split(
        block.in_proj(x, route), [c.d_inner, c.conv_dim, c.n_heads], dim=-1
    )
    conv = torch.zeros_like(xbc)
    for t in range(length):
        for j in range(c.d_conv):
            s = t - (c.d_conv - 1) + j
            if s >= 0:
                conv[:, t] += block.conv_weight[:, j] * xbc[:, s]
    xs, B, C = torch.split(
        F.silu(conv), [c.d_inner, c.d_state, c.d_state], dim=-1
    )
    xs = xs.reshape(batch, length, c.n_heads, c.headdim)
    dt = F.softplus(dt_raw + block.dt_bias)
    A = -torch.exp(block.A_log)

    y = torch.zeros_like(xs)
    for t in range(length):
        for s in range(t + 1):
            decay = torch.exp(A * dt[:, s + 1 : t + 1].sum(1))
            score = (C[:, t] * B[:, s]).sum(-1, keepdim=True)
            weight = decay * dt[:, s] * score
            y[:, t] += weight.unsqueeze(-1) * xs[:, s]
    y = y + block.D.unsqueeze(-1) * xs

    y = y.reshape(batch, length, c.d_inner) * F.silu(z)
    scale = torch.rsqrt(y.pow(2).mean(-1, keepdim=True) + block.norm.eps)
    return (y * scale * block.norm.weight) @ block.out_proj.weight.T


class TestBlock:
    @pytest.mark.parametrize("route", [TaskRoute.NONE, TaskRoute.MMU])
    def test_matches_quadratic_oracle_with_skip_term(self, block, route):
        randomize_adapters(block)
        with torch.no_grad():
            block.D.normal_()
        x = hidden(2, 8, block.config.d_model)

        with torch.no_grad():
            actual = block(x, route)
            expected = block_oracle(block, x, route)

        scale = expected.abs().max()
        assert float((actual - expected).abs().max() / scale) <= 1e-6

    @pytest.mark.parametrize("length", [1, 2, 7, 13])
    def test_parallel_matches_step(self, block, tiny_config, length):
        x = hidden(2, length, tiny_config.d_model)
        parallel = block(x, TaskRoute.NONE)

        state = block.init_state(2, torch.float64)
        stepped = []
        for t in range(length):
            state, out = block.step(state, x[:, t])
            stepped.append(out)

        torch.testing.assert_close(
            torch.stack(stepped, 1), parallel, rtol=1e-4, atol=1e-8
        )

    def test_state_after_parallel_pass_continues_decoding(
        self, block, tiny_config
    ):
        x = hidden(1, 9, tiny_config.d_model)
        expected = block(x)
        _, state = block.forward_with_state(x[:, :6])

        outputs = []
        for t in range(6, 9):
            state, out = block.step(state, x[:, t])
            outputs.append(out)

        torch.testing.assert_close(
            torch.stack(outputs, 1), expected[:, 6:], rtol=1e-4, atol=1e-8
        )

    def test_output_is_causal(self, block, tiny_config):
        x = hidden(1, 10, tiny_config.d_model)
        changed = x.clone()
        changed[:, 6:] += 5.0

        before, after = block(x), block(changed)

        assert torch.equal(before[:, :6], after[:, :6])
        assert not torch.allclose(before[:, 6:], after[:, 6:])

    def test_zero_input_gives_zero_output(self, block, tiny_config):
        zeros = torch.zeros(1, 5, tiny_config.d_model, dtype=torch.float64)
        out = block(zeros)

        assert torch.count_nonzero(out) == 0

    def test_step_leaves_given_state_untouched(self, block, tiny_config):
        state = block.init_state(1, torch.float64)
        block.step(state, hidden(1, 1, tiny_config.d_model)[:, 0])

        assert torch.count_nonzero(state.ssm_state) == 0
        assert torch.count_nonzero(state.conv_buffer) == 0

    def test_non_finite_input_raises(self, block, tiny_config):
        x = hidden(1, 3, tiny_config.d_model)
        x[0, 1, 0] = float("nan")

        with pytest.raises(NonFiniteActivationError):
            block(x)

    def test_mismatched_state_raises(self, block, tiny_config):
        state = block.init_state(2, torch.float64)
        bad = LayerState(state.conv_buffer[:, :-1], state.ssm_state)

        with pytest.raises(StateShapeError):
            block.step(bad, hidden(2, 1, tiny_config.d_model)[:, 0])
        with pytest.raises(StateShapeError):
            block.step(state, hidden(3, 1, tiny_config.d_model)[:, 0])


class TestBackbone:
    @pytest.mark.parametrize("route", list(TaskRoute))
    def test_stack_modes_agree(self, backbone, tiny_config, route):
        randomize_adapters(backbone)
        x = hidden(2, 11, tiny_config.d_model)

        parallel = stack_forward(backbone, x, route, "parallel")
        stepped = stack_forward(backbone, x, route, "step")

        torch.testing.assert_close(stepped, parallel, rtol=1e-4, atol=1e-8)

    @pytest.mark.parametrize("mode", ["parallel", "step"])
    def test_one_layer_stack_is_block_plus_residual(self, tiny_config, mode):
        torch.manual_seed(5)
        backbone = SsmBackbone(tiny_config.evolve(n_layers=1)).double()
        randomize_adapters(backbone)
        x = hidden(2, 6, tiny_config.d_model)
        layer = backbone.layers[0]

        with torch.no_grad():
            actual = stack_forward(backbone, x, TaskRoute.T2I, mode)
            block_out = layer.mixer(layer.norm(x), TaskRoute.T2I)
            expected = backbone.norm_f(x + block_out)

        torch.testing.assert_close(actual, expected, rtol=1e-4, atol=1e-8)

    def test_chunk_length_does_not_change_output(self, backbone, tiny_config):
        x = hidden(1, 10, tiny_config.d_model)

        torch.testing.assert_close(
            backbone.forward_parallel(x, TaskRoute.NONE, chunk_len=3),
            backbone.forward_parallel(x, TaskRoute.NONE, chunk_len=10),
        )

    def test_state_size_is_constant(self, backbone, tiny_config):
        state = backbone.init_state(1)
        sizes = set()
        for t in range(20):
            state, _ = backbone.step(
                state,
                hidden(1, 1, tiny_config.d_model, t)[:, 0],
                TaskRoute.T2I,
            )
            sizes.add(state.nbytes)

        assert sizes == {backbone.state_nbytes(1)}
        assert state.allocated_nbytes == state.nbytes

    def test_base_parameter_count_excludes_adapters(self, backbone):
        counted = sum(
            p.numel()
            for name, p in backbone.named_parameters()
            if ".adapters." not in name
        )

        assert backbone.base_parameter_count() == counted

    def test_unknown_mode_raises(self, backbone, tiny_config):
        with pytest.raises(ValueError):
            stack_forward(
                backbone,
                hidden(1, 2, tiny_config.d_model),
                TaskRoute.NONE,
                "x",
            )


@pytest.mark.slow
def test_long_decode_at_desk_scale_stays_finite():
    torch.manual_seed(0)
    backbone = SsmBackbone(ModelConfig())
    generator = torch.Generator().manual_seed(0)
    state = backbone.init_state(1)

    with torch.no_grad():
        for _ in range(10_000):
            x = torch.randn(1, backbone.config.d_model, generator=generator)
            layer_states = []
            for layer, layer_state in zip(backbone.layers, state.layers):
                layer_state, x = layer.step(layer_state, x, TaskRoute.T2I)
                assert torch.isfinite(x).all()
                layer_states.append(layer_state)
            state = SsmDecodeState(tuple(layer_states))

    assert all(torch.isfinite(s.ssm_state).all() for s in state.layers)
