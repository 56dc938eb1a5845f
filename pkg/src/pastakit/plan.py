"""Decode-dependency graph of an annotated response and the metrics built on it.

Every decoded token costs one timestep. Tokens the interpreter inserts itself
(the ``<async>`` that opens a fork and the ``<sync/>`` placed when the wait
ends) cost nothing. A node's earliest timestep is therefore one more than the
latest of its predecessors, or equal to it for inserted nodes; the critical
path is the largest earliest timestep in the graph.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from pastakit.errors import NonPositiveValue
from pastakit.lang import AnnotatedResponse, strip
from pastakit.tokenizer import Kind, Tokenizer


@dataclass
class Node:
    token_id: int
    thread_id: int
    is_control: bool
    is_inserted: bool
    preds: list[int] = field(default_factory=list)
    earliest_timestep: int = 0


@dataclass
class DependencyGraph:
    nodes: list[Node]

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(p, i) for i, n in enumerate(self.nodes) for p in n.preds]

    @property
    def non_control_tokens(self) -> int:
        return sum(1 for n in self.nodes if not n.is_control and not n.is_inserted)

    def add(self, node: Node) -> int:
        # preds always point backwards, so one forward pass settles timesteps
        base = max((self.nodes[p].earliest_timestep for p in node.preds), default=0)
        node.earliest_timestep = base if node.is_inserted else base + 1
        self.nodes.append(node)
        return len(self.nodes) - 1


def build_graph(r: AnnotatedResponse, tok: Tokenizer) -> DependencyGraph:
    g = DependencyGraph([])
    main_last: int | None = None
    # block -> (thread id, last node of that fork)
    forks: dict[int, tuple[int, int]] = {}
    unsynced: list[int] = []

    def after(prev: int | None) -> list[int]:
        return [] if prev is None else [prev]

    for info in tok.encode_response(r):
        if info.block is None:
            if info.kind is Kind.SYNC:
                decoded = g.add(Node(info.id, 0, True, False, after(main_last)))
                waits = [decoded] + [forks[b][1] for b in unsynced]
                main_last = g.add(Node(info.id, 0, True, True, waits))
                unsynced = []
            else:
                main_last = g.add(Node(info.id, 0, info.is_control, False, after(main_last)))
            continue
        b = info.block
        if info.kind is Kind.ASYNC_OPEN:
            # opened right after its promise, which is the latest main node
            thread = len(forks) + 1
            node = g.add(Node(info.id, thread, True, True, after(main_last)))
            forks[b] = (thread, node)
            unsynced.append(b)
        else:
            thread, last = forks[b]
            node = g.add(Node(info.id, thread, info.is_control, False, [last]))
            forks[b] = (thread, node)
    return g


def critical_path(g: DependencyGraph) -> int:
    return max((n.earliest_timestep for n in g.nodes), default=0)


def _path(g: DependencyGraph) -> int:
    cp = critical_path(g)
    if cp < 1:
        raise NonPositiveValue("empty response has no critical path")
    return cp


def theoretical_speedup(baseline_tokens: int, g: DependencyGraph) -> float:
    if baseline_tokens < 1:
        raise NonPositiveValue("baseline response must have at least one token")
    return baseline_tokens / _path(g)


def theoretical_parallelism(g: DependencyGraph) -> float:
    return g.non_control_tokens / _path(g)


class Mean(enum.Enum):
    GEOMETRIC = "geometric"
    ARITHMETIC = "arithmetic"


def aggregate(values: Iterable[float], mean: Mean | str = Mean.GEOMETRIC) -> float:
    """Geometric or arithmetic mean of positive ratios."""
    vals = list(values)
    if not vals:
        raise NonPositiveValue("cannot aggregate an empty list")
    if any(not v > 0 for v in vals):
        raise NonPositiveValue(f"ratios must be positive, got {min(vals)}")
    if Mean(mean) is Mean.GEOMETRIC:
        return math.exp(math.fsum(math.log(v) for v in vals) / len(vals))
    return math.fsum(vals) / len(vals)


@dataclass(frozen=True)
class SpeedupReport:
    baseline_tokens: int
    critical_path: int
    theoretical_speedup: float
    theoretical_parallelism: float

    def to_record(self) -> dict:
        return asdict(self)


def report(r: AnnotatedResponse, tok: Tokenizer, baseline_tokens: int | None = None) -> SpeedupReport:
    """Speedup report for ``r``; without a baseline the stripped response stands in."""
    g = build_graph(r, tok)
    if baseline_tokens is None:
        baseline_tokens = tok.count(strip(r))
    return SpeedupReport(
        baseline_tokens=baseline_tokens,
        critical_path=critical_path(g),
        theoretical_speedup=theoretical_speedup(baseline_tokens, g),
        theoretical_parallelism=theoretical_parallelism(g),
    )


def aggregate_reports(reports: Sequence[SpeedupReport]) -> dict[str, dict[str, float]]:
    out = {}
    for mean in Mean:
        out[mean.value] = {
            "theoretical_speedup": aggregate([r.theoretical_speedup for r in reports], mean),
            "theoretical_parallelism": aggregate([r.theoretical_parallelism for r in reports], mean),
        }
    return out
