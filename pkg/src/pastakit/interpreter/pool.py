"""Single pre-allocated cache pool shared by all decode threads.

Slots are handed out in decode order, so while several threads are live their
entries interleave. Once decoding ends, :meth:`KvPool.finalize` assigns each
slot its rank in the logical response order, where every fork's slots sit
right after the promise that spawned it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from pastakit.errors import PoolOverflow

DEFAULT_CAPACITY = 2048


@dataclass
class Slot:
    token_id: int
    thread_id: int
    position_id: int
    timestep: int
    logical_rank: int | None = None


class KvPool:
    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        self.capacity = capacity
        self.slots: list[Slot] = []

    @property
    def next_free(self) -> int:
        return len(self.slots)

    def __len__(self) -> int:
        return len(self.slots)

    def __getitem__(self, index: int) -> Slot:
        return self.slots[index]

    def owner(self, index: int) -> int:
        return self.slots[index].thread_id

    def append(self, token_id: int, thread_id: int, position_id: int, timestep: int) -> int:
        if len(self.slots) >= self.capacity:
            raise PoolOverflow(f"cache pool is full ({self.capacity} slots)")
        self.slots.append(Slot(token_id, thread_id, position_id, timestep))
        return len(self.slots) - 1

    def finalize(self, order: Sequence[int]) -> None:
        if sorted(order) != list(range(len(self.slots))):
            raise ValueError("logical order must be a permutation of the pool slots")
        for rank, index in enumerate(order):
            self.slots[index].logical_rank = rank

    def logical_order(self) -> list[int]:
        ranked = [(s.logical_rank, i) for i, s in enumerate(self.slots)]
        if any(r is None for r, _ in ranked):
            raise ValueError("pool is not finalized")
        return [i for _, i in sorted(ranked)]
