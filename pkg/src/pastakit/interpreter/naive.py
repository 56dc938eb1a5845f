"""Naive batched interpreter: one preallocated cache row per thread.

Each fork runs in its own row holding a copy of the main row's prefix, so
plain causal attention within the row gives the right visibility. At a sync
the fork rows are spliced into the main row right after their promises and
then released. This is the wasteful layout the pooled interpreter avoids; it
is kept as an independent reference for differential testing.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, replace
from typing import Sequence

from pastakit.backends.base import DecoderBackend, Feed, StepRequest, ThreadRequest
from pastakit.errors import BackendError, PoolOverflow, RowExhausted, RunawayFork
from pastakit.interpreter.core import DecodeEvent, InterpreterConfig, RunStats, Transcript
from pastakit.interpreter.positions import PositionStrategy, assign_position
from pastakit.lang import Promise
from pastakit.tokenizer import ASYNC_CLOSE, ASYNC_OPEN, SYNC, Kind, Tokenizer


@dataclass(eq=False)
class _Entry:
    token: int
    position: int
    uid: int
    computed: bool = False
    # set on a moved </async>: attend only to entries that shared its fork row
    only: frozenset[int] | None = None


@dataclass(eq=False)
class _Thread:
    tid: int
    row: int
    prefix_len: int = 0
    promise_uid: int | None = None
    status: str = "active"
    decoded: int = 0
    next_position: int = 0


class _NaiveRun:
    def __init__(self, prompt, backend, tok, strategy, config: InterpreterConfig, oracle_lengths):
        self.prompt = tuple(prompt)
        self.backend = backend
        self.tok = tok
        self.strategy = strategy
        self.config = config
        self.oracle_lengths = oracle_lengths
        self.row_len = config.max_sequence_length
        self.rows: list[list[_Entry] | None] = [None] * config.max_threads
        self.rows[0] = []
        self.main = _Thread(0, 0)
        self.threads = [self.main]
        self.unsynced: list[_Thread] = []
        self.uids = itertools.count()
        self.events: list[DecodeEvent] = []
        self.stats = RunStats()
        self.step_seconds: list[float] = []
        self.waiting: tuple[int, _Entry, int] | None = None

    def _slot(self, row: int, col: int) -> int:
        return row * self.row_len + col

    def _push(self, row: int, token: int, position: int) -> tuple[_Entry, int]:
        cells = self.rows[row]
        if len(cells) >= self.row_len:
            raise PoolOverflow(f"row {row} is full ({self.row_len} slots)")
        entry = _Entry(token, position, next(self.uids))
        cells.append(entry)
        return entry, self._slot(row, len(cells) - 1)

    def _request_for(self, th: _Thread) -> ThreadRequest:
        cells = self.rows[th.row]
        feeds = []
        for col, e in enumerate(cells):
            if e.computed:
                continue
            if e.only is None:
                visible = [self._slot(th.row, c) for c in range(col + 1)]
            else:
                visible = [self._slot(th.row, c) for c, x in enumerate(cells) if x.uid in e.only]
            feeds.append(Feed(self._slot(th.row, col), e.token, e.position, frozenset(visible)))
            e.computed = True
        return ThreadRequest(th.tid, tuple(feeds))

    # --- tokens -------------------------------------------------------------------

    def _on_main(self, token: int, t: int) -> _Entry | None:
        kind = self.tok.kind(token)
        if kind is Kind.EOS:
            self.main.status = "done"
            return None
        pos = self.main.next_position
        self.main.next_position += 1
        if kind is Kind.SYNC:
            self.main.status = "waiting"
            self.waiting = (t, _Entry(SYNC, pos, next(self.uids)), len(self.events))
            self.events.append(DecodeEvent(t, 0, token, -1, pos))
            return None
        entry, slot = self._push(0, token, pos)
        self.events.append(DecodeEvent(t, 0, token, slot, pos))
        return entry if kind is Kind.PROMISE else None

    def _on_fork(self, th: _Thread, token: int, t: int) -> None:
        kind = self.tok.kind(token)
        if kind is Kind.EOS:
            token, kind = ASYNC_CLOSE, Kind.ASYNC_CLOSE
        pos = th.next_position
        th.next_position += 1
        th.decoded += 1
        _, slot = self._push(th.row, token, pos)
        self.events.append(DecodeEvent(t, th.tid, token, slot, pos))
        if kind is Kind.ASYNC_CLOSE:
            th.status = "done"
        elif th.decoded >= self.config.fork_token_cap:
            raise RunawayFork(f"fork {th.tid} decoded {th.decoded} tokens without </async>")

    def _spawn(self, promise: _Entry, t: int) -> None:
        free = [i for i, r in enumerate(self.rows) if r is None]
        if not free:
            raise RowExhausted(f"no free cache row for a new thread at t={t} ({len(self.rows)} rows)")
        row = free[0]
        tid = len(self.threads)
        main_cells = self.rows[0]
        copies = [_Entry(e.token, e.position, e.uid, e.computed) for e in main_cells]
        self.rows[row] = copies
        src = [self._slot(0, c) for c, e in enumerate(main_cells) if e.computed]
        dst = [self._slot(row, c) for c, e in enumerate(main_cells) if e.computed]
        if src:
            self.backend.copy_slots(src, dst)
        th = _Thread(tid, row, prefix_len=len(copies), promise_uid=promise.uid)
        topic, tokens = self.tok.promise_attrs(promise.token)
        actual = None
        if self.oracle_lengths is not None and tid - 1 < len(self.oracle_lengths):
            actual = self.oracle_lengths[tid - 1]
        offset = assign_position(self.strategy, Promise(topic, tokens, tid), actual)
        self._push(row, ASYNC_OPEN, promise.position + 1)
        th.next_position = promise.position + 2
        self.main.next_position = promise.position + 1 + offset
        self.threads.append(th)
        self.unsynced.append(th)
        self.stats.spawns += 1
        live = sum(1 for x in self.threads if x.status != "done")
        self.stats.max_concurrent_threads = max(self.stats.max_concurrent_threads, live)

    def _splice(self, forks: Sequence[_Thread], tail: list[_Entry]) -> list[_Entry]:
        """Main row with each fork's block inserted after its promise."""
        by_promise = {th.promise_uid: th for th in forks}
        merged: list[_Entry] = []
        for e in self.rows[0]:
            merged.append(e)
            th = by_promise.get(e.uid)
            if th is None:
                continue
            cells = self.rows[th.row]
            members = frozenset(x.uid for x in cells)
            for x in cells[th.prefix_len:]:
                if not x.computed:
                    x.only = members
                merged.append(x)
        return merged + tail

    def _release(self, t: int) -> None:
        decoded_at, sync, event_index = self.waiting
        for th in self.unsynced:
            sync.position = max(sync.position, th.next_position)
        self.main.next_position = sync.position + 1
        old_slot = {}
        for c, e in enumerate(self.rows[0]):
            old_slot[e.uid] = self._slot(0, c)
        for th in self.unsynced:
            for c, e in enumerate(self.rows[th.row][th.prefix_len:], start=th.prefix_len):
                old_slot[e.uid] = self._slot(th.row, c)
        merged = self._splice(self.unsynced, [sync])
        if len(merged) > self.row_len:
            raise PoolOverflow(f"main row overflows at sync ({len(merged)} > {self.row_len})")
        src, dst = [], []
        for c, e in enumerate(merged):
            if e.computed and old_slot[e.uid] != self._slot(0, c):
                src.append(old_slot[e.uid])
                dst.append(self._slot(0, c))
        if src:
            self.backend.copy_slots(src, dst)
        self.rows[0] = merged
        for th in self.unsynced:
            self.rows[th.row] = None
        self.events[event_index] = replace(self.events[event_index], slot=self._slot(0, len(merged) - 1),
                                           position_id=sync.position)
        self.stats.sync_waits.append(t - decoded_at)
        self.unsynced = []
        self.waiting = None
        self.main.status = "active"

    # --- driver -----------------------------------------------------------------

    def execute(self) -> Transcript:
        self.backend.reset(len(self.rows) * self.row_len)
        for pos, token in enumerate(self.prompt):
            self._push(0, token, pos)
        self.main.next_position = len(self.prompt)
        t = 0
        while True:
            active = [th for th in self.threads if th.status == "active"]
            if not active:
                break
            t += 1
            request = StepRequest(t, tuple(self._request_for(th) for th in active))
            start = time.perf_counter()
            outputs = self.backend.step(request)
            self.step_seconds.append(time.perf_counter() - start)
            if [o.thread_id for o in outputs] != [th.tid for th in active]:
                raise BackendError("backend answered the wrong set of threads")
            spawn = None
            for th, out in zip(active, outputs):
                if th.tid == 0:
                    spawn = self._on_main(out.token_id, t)
                else:
                    self._on_fork(th, out.token_id, t)
            if spawn is not None:
                self._spawn(spawn, t)
            if self.waiting is not None and all(th.status == "done" for th in self.unsynced):
                self._release(t)

        final = self._splice(self.unsynced, [])[len(self.prompt):]
        return Transcript(
            prompt_tokens=self.prompt,
            events=tuple(self.events),
            logical_tokens=tuple(e.token for e in final),
            logical_positions=tuple(e.position for e in final),
            num_timesteps=max((e.timestep for e in self.events), default=0),
            stats=self.stats,
            step_seconds=tuple(self.step_seconds),
        )


def naive_run(
    prompt_tokens: Sequence[int],
    backend: DecoderBackend,
    tok: Tokenizer,
    strategy: PositionStrategy = PositionStrategy(),
    config: InterpreterConfig = InterpreterConfig(),
    *,
    oracle_lengths: Sequence[int] | None = None,
) -> Transcript:
    """Same decode semantics as :func:`pastakit.interpreter.run`, with one row per thread."""
    return _NaiveRun(prompt_tokens, backend, tok, strategy, config, oracle_lengths).execute()
