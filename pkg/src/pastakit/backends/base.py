"""Contract between the interpreter loop and a decoder backend.

Per timestep the interpreter sends one :class:`StepRequest` holding, for each
active thread, the tokens whose key/value entries must be computed this step
(``feeds``). The last feed of a thread is its pending token; the backend
answers with that thread's next token. Each feed names the cache slots it may
attend to, itself included, and those slots are either already cached or fed
in the same request.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Collection, Protocol, Sequence, runtime_checkable


@dataclass(frozen=True, eq=False)
class Feed:
    """One token entering the cache.

    The visible set is materialized lazily from ``source`` (optionally only its
    first ``length`` entries) because most backends never look at it.
    """

    slot: int
    token_id: int
    position_id: int
    source: Collection[int] = field(default=frozenset(), repr=False)
    length: int | None = None

    @cached_property
    def visible(self) -> frozenset[int]:
        if self.length is None:
            return frozenset(self.source)
        return frozenset(self.source[: self.length])  # type: ignore[index]


@dataclass(frozen=True)
class ThreadRequest:
    thread_id: int
    feeds: tuple[Feed, ...]

    @property
    def last_token(self) -> int | None:
        return self.feeds[-1].token_id if self.feeds else None

    @property
    def position_id(self) -> int | None:
        return self.feeds[-1].position_id if self.feeds else None

    @property
    def visible(self) -> frozenset[int]:
        return self.feeds[-1].visible if self.feeds else frozenset()


@dataclass(frozen=True)
class StepRequest:
    timestep: int
    threads: tuple[ThreadRequest, ...]
    # read-only handle on the interpreter's cache layout, for instrumentation
    pool: Any = None


@dataclass(frozen=True)
class StepOutput:
    thread_id: int
    token_id: int
    logits: Any = None


@runtime_checkable
class DecoderBackend(Protocol):
    def reset(self, capacity: int) -> None:
        """Forget all cached state; the next run addresses slots ``0..capacity-1``."""

    def step(self, request: StepRequest) -> list[StepOutput]:
        """Decode one token for every thread in ``request``, ascending thread id."""

    def copy_slots(self, src: Sequence[int], dst: Sequence[int]) -> None:
        """Copy cached entries ``src[i] -> dst[i]`` as one simultaneous move."""
