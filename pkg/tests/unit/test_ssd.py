import pytest
import torch

from uniroute.model.ssd import segsum, ssd_chunked, ssd_quadratic, ssd_step


def random_scan_inputs(seed, length, batch=2, heads=3, headdim=4, d_state=5):
    generator = torch.Generator().manual_seed(seed)

    def randn(*shape):
        return torch.randn(*shape, generator=generator, dtype=torch.float64)

    x = randn(batch, length, heads, headdim)
    dt = torch.nn.functional.softplus(randn(batch, length, heads))
    A = -torch.exp(randn(heads))
    B = randn(batch, length, heads, d_state)
    C = randn(batch, length, heads, d_state)
    return x, dt, A, B, C


def fold_steps(x, dt, A, B, C):
    batch, length, heads, headdim = x.shape
    state = torch.zeros(batch, heads, headdim, B.shape[-1], dtype=x.dtype)
    outputs = []
    for t in range(length):
        state, y = ssd_step(state, x[:, t], dt[:, t], A, B[:, t], C[:, t])
        outputs.append(y)
    return torch.stack(outputs, dim=1), state


def relative_error(actual, expected):
    scale = expected.abs().max().clamp_min(1e-12)
    return float((actual - expected).abs().max() / scale)


class TestSegsum:
    def test_lower_triangle_holds_partial_sums(self):
        x = torch.tensor([1.0, 2.0, 3.0, 4.0])
        out = segsum(x)

        assert out[3, 0] == 2.0 + 3.0 + 4.0
        assert out[2, 1] == 3.0
        assert torch.all(torch.diagonal(out) == 0)
        assert torch.isneginf(out[0, 1])


class TestScanEquivalence:
    @pytest.mark.parametrize("length", [1, 2, 7, 64])
    def test_three_paths_agree(self, length):
        for seed in range(25):
            x, dt, A, B, C = random_scan_inputs(seed, length)
            oracle = ssd_quadratic(x, dt, A, B, C)
            stepped, _ = fold_steps(x, dt, A, B, C)
            for chunk_len in (1, 4, 16):
                chunked, _ = ssd_chunked(x, dt, A, B, C, chunk_len)
                assert relative_error(chunked, oracle) <= 1e-4
            assert relative_error(stepped, oracle) <= 1e-4

    @pytest.mark.parametrize("chunk_len", [3, 8, 64])
    def test_final_state_matches_recurrence(self, chunk_len):
        x, dt, A, B, C = random_scan_inputs(7, 20)
        _, expected = fold_steps(x, dt, A, B, C)
        _, state = ssd_chunked(x, dt, A, B, C, chunk_len)

        assert relative_error(state, expected) <= 1e-4

    def test_initial_state_carries_across_calls(self):
        x, dt, A, B, C = random_scan_inputs(3, 24)
        whole, whole_state = ssd_chunked(x, dt, A, B, C, 8)
        head, state = ssd_chunked(
            x[:, :10], dt[:, :10], A, B[:, :10], C[:, :10], 8
        )
        tail, tail_state = ssd_chunked(
            x[:, 10:], dt[:, 10:], A, B[:, 10:], C[:, 10:], 8, state
        )

        assert relative_error(torch.cat([head, tail], 1), whole) <= 1e-4
        assert relative_error(tail_state, whole_state) <= 1e-4

    def test_zero_input_gives_zero_output(self):
        x, dt, A, B, C = random_scan_inputs(0, 9)
        y, state = ssd_chunked(torch.zeros_like(x), dt, A, B, C, 4)

        assert torch.count_nonzero(y) == 0
        assert torch.count_nonzero(state) == 0
