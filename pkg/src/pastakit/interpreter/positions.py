"""Position-ID strategies for tokens that follow a promise.

While an async block is still being decoded the main thread does not know
its length, so tokens after the promise get positions offset by an estimate.
The block occupies the inserted ``<async>`` plus ``estimate`` further
positions (contents and ``</async>``); the returned offset is ``estimate + 1``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from pastakit.errors import MissingOracleLength
from pastakit.lang import Promise, round10

DEFAULT_FIXED_LENGTH = 40


class Kind(enum.Enum):
    FIXED = "fixed"
    PRED1X = "pred1x"
    PRED10X = "pred10x"
    ORACLE1X = "oracle1x"
    ORACLE10X = "oracle10x"
    ORACLE_EXACT = "oracle-exact"


@dataclass(frozen=True)
class PositionStrategy:
    kind: Kind = Kind.PRED10X
    fixed_length: int = DEFAULT_FIXED_LENGTH

    @property
    def needs_oracle(self) -> bool:
        return self.kind in (Kind.ORACLE1X, Kind.ORACLE10X, Kind.ORACLE_EXACT)

    @property
    def name(self) -> str:
        if self.kind is Kind.FIXED:
            return f"fixed:{self.fixed_length}"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> PositionStrategy:
        """``fixed``, ``fixed:40``, ``pred1x``, ``pred10x``, ``oracle1x``, ``oracle10x``, ``oracle-exact``."""
        name, _, arg = text.strip().lower().partition(":")
        kind = Kind(name)
        if kind is Kind.FIXED:
            return cls(kind, int(arg) if arg else DEFAULT_FIXED_LENGTH)
        if arg:
            raise ValueError(f"strategy {name!r} takes no argument")
        return cls(kind)


def block_estimate(strategy: PositionStrategy, promise: Promise, actual_len: int | None = None) -> int:
    """Estimated block length (contents plus ``</async>``) used for offsets."""
    kind = strategy.kind
    if kind is Kind.FIXED:
        return strategy.fixed_length
    if kind in (Kind.PRED1X, Kind.PRED10X):
        return promise.tokens
    if actual_len is None:
        raise MissingOracleLength(f"{strategy.name} needs the realized length of block {promise.block_id}")
    if kind is Kind.ORACLE10X:
        return round10(actual_len)
    return actual_len


def assign_position(strategy: PositionStrategy, promise: Promise, actual_len: int | None = None) -> int:
    """Offset added to main-thread positions after ``promise``."""
    return max(1, block_estimate(strategy, promise, actual_len) + 1)
