"""Deterministic replay backend for scheduling tests and benchmarks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

from pastakit.backends.base import StepOutput, StepRequest
from pastakit.errors import ScriptExhausted
from pastakit.lang import AnnotatedResponse
from pastakit.tokenizer import ASYNC_CLOSE, ASYNC_OPEN, EOS, Tokenizer


def split_scripts(ids: Sequence[int]) -> tuple[list[int], list[list[int]]]:
    """Split a serialized token sequence into main and per-block scripts.

    The main script holds everything outside blocks (the ``<async>`` tags are
    inserted by the interpreter, never decoded); block ``k`` holds the
    contents of the k-th block followed by ``</async>``.
    """
    main: list[int] = []
    forks: list[list[int]] = []
    inside = False
    for tid in ids:
        if tid == ASYNC_OPEN and not inside:
            forks.append([])
            inside = True
        elif inside:
            forks[-1].append(tid)
            if tid == ASYNC_CLOSE:
                inside = False
        else:
            main.append(tid)
    return main, forks


@dataclass
class ScriptedBackend:
    """Replays fixed token scripts: thread 0 reads ``main``, fork k reads ``forks[k-1]``.

    ``latency`` seconds are slept once per step, uniform regardless of how
    many threads are batched, which models a memory-bound decoder.
    """

    main: list[int]
    forks: list[list[int]] = field(default_factory=list)
    latency: float = 0.0
    _cursors: dict[int, int] = field(default_factory=dict, init=False, repr=False)
    requests: list[StepRequest] = field(default_factory=list, init=False, repr=False)
    record_requests: bool = False

    @classmethod
    def from_tokens(cls, ids: Sequence[int], latency: float = 0.0) -> ScriptedBackend:
        main, forks = split_scripts(ids)
        return cls(main + [EOS], forks, latency)

    @classmethod
    def from_response(cls, r: AnnotatedResponse, tok: Tokenizer, latency: float = 0.0) -> ScriptedBackend:
        return cls.from_tokens([t.id for t in tok.encode_response(r)], latency)

    @classmethod
    def sequential(cls, ids: Sequence[int], latency: float = 0.0) -> ScriptedBackend:
        """Plain replay of ``ids`` on the main thread, no forks."""
        return cls(list(ids) + [EOS], [], latency)

    @property
    def oracle_lengths(self) -> list[int]:
        """Realized block lengths (contents plus ``</async>``) in spawn order."""
        return [len(f) for f in self.forks]

    def reset(self, capacity: int) -> None:
        self._cursors = {}
        self.requests = []

    def step(self, request: StepRequest) -> list[StepOutput]:
        if self.record_requests:
            self.requests.append(request)
        out = []
        for th in request.threads:
            tid = th.thread_id
            script = self.main if tid == 0 else self._fork_script(tid)
            i = self._cursors.get(tid, 0)
            if i >= len(script):
                raise ScriptExhausted(f"thread {tid} has no scripted token left at t={request.timestep}")
            self._cursors[tid] = i + 1
            out.append(StepOutput(tid, script[i]))
        if self.latency:
            time.sleep(self.latency)
        return out

    def _fork_script(self, tid: int) -> list[int]:
        if tid - 1 >= len(self.forks):
            raise ScriptExhausted(f"no script for fork {tid}")
        return self.forks[tid - 1]

    def copy_slots(self, src: Sequence[int], dst: Sequence[int]) -> None:
        pass
