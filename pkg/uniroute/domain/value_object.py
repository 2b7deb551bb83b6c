from __future__ import annotations

import dataclasses
from abc import ABC
from dataclasses import dataclass
from typing import Any, Type, TypeVar

VO = TypeVar("VO", bound="ValueObject")


@dataclass(frozen=True)
class ValueObject(ABC):
    """Represent an immutable value: configurations, tokens, layouts.

    Implement it as a frozen dataclass and put the invariants in `validate`,
    then always build instances through `create`.

    >>> @dataclass(frozen=True)
    ... class MyClass(ValueObject):
    ...     field: int
    ...
    ...     def validate(self) -> None:
    ...         if self.field < 0:
    ...             raise InvalidConfigError("field must be >= 0")
    """

    @classmethod
    def create(cls: Type[VO], **kwargs: Any) -> VO:
        obj = cls(**kwargs)
        obj.validate()
        return obj

    def validate(self) -> None:
        """Raise an UniRouteError subclass when an invariant doesn't hold."""

    def evolve(self: VO, **changes: Any) -> VO:
        """Return a validated copy with some fields replaced."""
        obj = dataclasses.replace(self, **changes)
        obj.validate()
        return obj
