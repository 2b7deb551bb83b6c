from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Tuple

from torch import Tensor, nn

from uniroute.domain.task import TaskRoute


class AbstractDecodeState(ABC):
    """Per-session recurrent memory of a backbone."""

    @property
    @abstractmethod
    def nbytes(self) -> int:
        raise NotImplementedError

    @property
    def allocated_nbytes(self) -> int:
        """Bytes held in storage, spare capacity included."""
        return self.nbytes


class AbstractBackbone(nn.Module, ABC):
    """Sequence mixer stack between the embeddings and the vocabulary heads.

    Implementations run in two modes: a parallel mode over whole sequences
    (training, prefill) and a single-step mode over a decode state.
    Hidden tensors are (batch, length, d_model).
    """

    @abstractmethod
    def forward_parallel(self, hidden: Tensor, route: TaskRoute) -> Tensor:
        raise NotImplementedError

    @abstractmethod
    def prefill(
        self, hidden: Tensor, route: TaskRoute
    ) -> Tuple[Tensor, AbstractDecodeState]:
        raise NotImplementedError

    @abstractmethod
    def init_state(self, batch_size: int) -> AbstractDecodeState:
        raise NotImplementedError

    @abstractmethod
    def step(
        self, state: AbstractDecodeState, hidden: Tensor, route: TaskRoute
    ) -> Tuple[AbstractDecodeState, Tensor]:
        """Advance one position; hidden is (batch, d_model)."""
        raise NotImplementedError

    @abstractmethod
    def base_parameter_count(self) -> int:
        """Parameters of the mixer stack, adapters excluded."""
        raise NotImplementedError
