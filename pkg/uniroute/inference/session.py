from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import Tensor

from uniroute.data.sequence import parse_layout
from uniroute.domain.generation import GenerationConfig
from uniroute.domain.stream import LayoutError, TrainingExample
from uniroute.domain.task import TaskRoute
from uniroute.domain.token import Modality, Token, modality_code
from uniroute.model.network import UniRouteModel
from uniroute.ports.backbone import AbstractDecodeState


@dataclass
class DecodeSession:
    """Decode state of one sequence; owned by a single caller.

    `hidden` is the final normalized hidden state after the last fed token,
    i.e. what the heads read to predict the next one.
    """

    model: UniRouteModel
    route: TaskRoute
    state: AbstractDecodeState
    hidden: Tensor
    position: int
    config: GenerationConfig = field(default_factory=GenerationConfig)
    features: Optional[Tensor] = None
    generator: torch.Generator = field(default_factory=torch.Generator)

    @property
    def nbytes(self) -> int:
        return self.state.nbytes

    @property
    def allocated_nbytes(self) -> int:
        return self.state.allocated_nbytes

    @torch.no_grad()
    def feed(self, token: Token) -> Tensor:
        embedded = self.model.embed_token(token, self.features)
        self.state, self.hidden = self.model.backbone.step(
            self.state, embedded, self.route
        )
        self.position += 1
        return self.hidden


@torch.no_grad()
def prefill(
    model: UniRouteModel,
    prompt: TrainingExample,
    config: Optional[GenerationConfig] = None,
    mode: str = "parallel",
) -> DecodeSession:
    """Run the prompt and return a session positioned after it.

    The parallel mode computes the state with the chunked scan; the step
    mode folds the recurrence token by token.
    """
    config = config or GenerationConfig()
    tokens = prompt.stream.tokens
    layout = parse_layout(tokens, prefix=True)
    if layout.route is not prompt.route:
        raise LayoutError(
            f"{prompt.route.value} prompt laid out as {layout.route.value}"
        )
    features = prompt.visual_features
    if features is not None:
        features = features.to(model.projector.weight.dtype)
    generator = torch.Generator().manual_seed(config.seed)

    if mode == "step":
        session = DecodeSession(
            model=model,
            route=prompt.route,
            state=model.backbone.init_state(1),
            hidden=torch.empty(0),
            position=0,
            config=config,
            features=features,
            generator=generator,
        )
        for token in tokens:
            session.feed(token)
        return session
    if mode != "parallel":
        raise ValueError(f"unknown prefill mode {mode!r}")

    kinds = torch.tensor([[modality_code(t.modality) for t in tokens]])
    ids = torch.tensor([[t.id for t in tokens]])
    placed = None
    if features is not None:
        placed = torch.zeros(
            1, len(tokens), features.shape[-1], dtype=features.dtype
        )
        slots = kinds[0] == modality_code(Modality.FEATURE)
        placed[0, slots] = features[ids[0, slots]]
    hidden = model.embed(kinds, ids, placed)
    out, state = model.backbone.prefill(hidden, prompt.route)
    return DecodeSession(
        model=model,
        route=prompt.route,
        state=state,
        hidden=out[:, -1],
        position=len(tokens),
        config=config,
        features=features,
        generator=generator,
    )
