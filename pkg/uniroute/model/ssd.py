"""Scalar-decay state space scans.

Shapes: x (batch, length, heads, headdim), dt (batch, length, heads),
A (heads,) strictly negative, B and C (batch, length, heads, d_state).
The recurrent state is (batch, heads, headdim, d_state) and evolves as

    S_t = exp(dt_t * A) * S_{t-1} + dt_t * x_t B_t^T
    y_t = S_t C_t
"""
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange, repeat
from torch import Tensor


def segsum(x: Tensor) -> Tensor:
    """out[..., i, j] = x[..., j+1] + ... + x[..., i] for i >= j, -inf above
    the diagonal."""
    length = x.size(-1)
    x = repeat(x, "... d -> ... d e", e=length)
    strict = torch.tril(
        torch.ones(length, length, dtype=torch.bool, device=x.device), -1
    )
    x = x.masked_fill(~strict, 0)
    out = torch.cumsum(x, dim=-2)
    causal = torch.tril(
        torch.ones(length, length, dtype=torch.bool, device=x.device), 0
    )
    return out.masked_fill(~causal, -torch.inf)


def ssd_chunked(
    x: Tensor,
    dt: Tensor,
    A: Tensor,
    B: Tensor,
    C: Tensor,
    chunk_len: int,
    initial_state: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """Chunked scan: quadratic inside chunks, recurrent across them.

    Returns the outputs and the state after the last position.
    """
    _, length, _, _ = x.shape
    pad = (-length) % chunk_len
    X = x * dt.unsqueeze(-1)
    log_a = dt * A
    if pad:
        # zero log-decay and zero input leave the carried state untouched
        X = F.pad(X, (0, 0, 0, 0, 0, pad))
        B = F.pad(B, (0, 0, 0, 0, 0, pad))
        C = F.pad(C, (0, 0, 0, 0, 0, pad))
        log_a = F.pad(log_a, (0, 0, 0, pad))

    X, B, C = (
        rearrange(t, "b (c l) h d -> b c l h d", l=chunk_len)
        for t in (X, B, C)
    )
    log_a = rearrange(log_a, "b (c l) h -> b h c l", l=chunk_len)
    a_cumsum = torch.cumsum(log_a, dim=-1)

    decay = torch.exp(segsum(log_a))
    y_diag = torch.einsum("bclhn,bcshn,bhcls,bcshp->bclhp", C, B, decay, X)

    decay_to_end = torch.exp(a_cumsum[..., -1:] - a_cumsum)
    chunk_states = torch.einsum(
        "bclhn,bhcl,bclhp->bchpn", B, decay_to_end, X
    )
    if initial_state is None:
        initial_state = torch.zeros_like(chunk_states[:, 0])
    chunk_states = torch.cat([initial_state.unsqueeze(1), chunk_states], 1)
    decay_chunk = torch.exp(segsum(F.pad(a_cumsum[..., -1], (1, 0))))
    carried = torch.einsum("bhzc,bchpn->bzhpn", decay_chunk, chunk_states)
    chunk_states, final_state = carried[:, :-1], carried[:, -1]

    y_off = torch.einsum(
        "bclhn,bchpn,bhcl->bclhp", C, chunk_states, torch.exp(a_cumsum)
    )
    y = rearrange(y_diag + y_off, "b c l h p -> b (c l) h p")
    return y[:, :length], final_state


def ssd_step(
    state: Tensor, x: Tensor, dt: Tensor, A: Tensor, B: Tensor, C: Tensor
) -> Tuple[Tensor, Tensor]:
    """One recurrence step; x (b, h, p), dt (b, h), B and C (b, h, n)."""
    decay = torch.exp(dt * A)
    update = torch.einsum("bh,bhn,bhp->bhpn", dt, B, x)
    state = state * rearrange(decay, "b h -> b h 1 1") + update
    y = torch.einsum("bhpn,bhn->bhp", state, C)
    return state, y


def ssd_quadratic(
    x: Tensor, dt: Tensor, A: Tensor, B: Tensor, C: Tensor
) -> Tensor:
    """Naive O(L^2) materialization, the reference for both scans.

    y_t = sum_{s<=t} (a_{s+1} ... a_t) dt_s (C_t . B_s) x_s
    """
    _, length, _, _ = x.shape
    a = torch.exp(dt * A)
    rows = []
    for t in range(length):
        acc = torch.zeros_like(x[:, t])
        carry = torch.ones_like(a[:, t])
        for s in range(t, -1, -1):
            score = (C[:, t] * B[:, s]).sum(-1) * dt[:, s] * carry
            acc = acc + score.unsqueeze(-1) * x[:, s]
            carry = carry * a[:, s]
        rows.append(acc)
    return torch.stack(rows, dim=1)
