"""Lockstep asynchronous-decoding interpreter over one interleaved cache pool.

Each timestep every active thread decodes one token through a single batched
backend call, threads ordered by ascending id (main is 0, forks are numbered
in spawn order). A promise decoded by main spawns a fork: the interpreter
appends the fork's ``<async>`` to the pool in the same timestep and the fork
decodes from the next one. ``<sync/>`` parks main until every fork spawned
since the previous sync has decoded ``</async>``; only then does the sync
token enter the pool and main resume.

Visibility follows the cache layout: main sees its own slots plus the
contents of forks it has synchronized with; a fork sees what main could see
when it was spawned (its promise included) plus its own slots.
"""

from __future__ import annotations

import enum
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import IO, Sequence

from pastakit.backends.base import DecoderBackend, Feed, StepRequest, ThreadRequest
from pastakit.errors import BackendError, MaxThreadsExceeded, RunawayFork
from pastakit.interpreter.pool import KvPool
from pastakit.interpreter.positions import PositionStrategy, assign_position
from pastakit.lang import Promise
from pastakit.tokenizer import ASYNC_CLOSE, ASYNC_OPEN, SYNC, Kind, Tokenizer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InterpreterConfig:
    max_sequence_length: int = 2048
    max_threads: int = 8
    fork_token_cap: int = 512


class Status(enum.Enum):
    ACTIVE = "active"
    DONE = "done"
    WAITING_AT_SYNC = "waiting_at_sync"


@dataclass
class ThreadState:
    thread_id: int
    spawn_slot: int | None = None
    status: Status = Status.ACTIVE
    owned_slots: list[int] = field(default_factory=list)
    promise_ref: int | None = None
    # append-only: any prefix of it is the view at some earlier moment
    view: list[int] = field(default_factory=list, repr=False)
    pending: list[tuple[int, int]] = field(default_factory=list, repr=False)
    next_position: int = 0
    decoded: int = 0


def visible_slots(slot: int, thread: ThreadState) -> frozenset[int]:
    """Slots a token at ``slot`` decoded by ``thread`` may attend to."""
    return frozenset(s for s in thread.view if s <= slot)


@dataclass(frozen=True)
class DecodeEvent:
    timestep: int
    thread_id: int
    token_id: int
    slot: int
    position_id: int

    def to_record(self) -> dict:
        return {"t": self.timestep, "thread": self.thread_id, "token": self.token_id,
                "slot": self.slot, "pos": self.position_id}


@dataclass
class RunStats:
    spawns: int = 0
    max_concurrent_threads: int = 1
    sync_waits: list[int] = field(default_factory=list)


@dataclass
class Transcript:
    prompt_tokens: tuple[int, ...]
    events: tuple[DecodeEvent, ...]
    logical_tokens: tuple[int, ...]
    logical_positions: tuple[int, ...]
    num_timesteps: int
    stats: RunStats
    step_seconds: tuple[float, ...] = ()
    logical_slots: tuple[int, ...] = ()
    pool: KvPool | None = field(default=None, repr=False, compare=False)

    def token_stream(self) -> list[tuple[int, int, int, int]]:
        """Decode events without cache addresses, for comparing interpreters."""
        return [(e.timestep, e.thread_id, e.token_id, e.position_id) for e in self.events]

    def text(self, tok: Tokenizer) -> str:
        return tok.detokenize(self.logical_tokens)

    def position_gaps(self) -> list[int]:
        """Per response token: assigned position minus its sequential position."""
        base = len(self.prompt_tokens)
        return [p - (base + i) for i, p in enumerate(self.logical_positions)]

    def write_trace(self, fp: IO[str]) -> None:
        for e in self.events:
            fp.write(json.dumps(e.to_record()) + "\n")

    def summary(self) -> dict:
        return {"num_timesteps": self.num_timesteps, "stats": asdict(self.stats),
                "response_tokens": len(self.logical_tokens)}


class _Run:
    def __init__(self, prompt, backend, tok, strategy, config, oracle_lengths):
        self.prompt = tuple(prompt)
        self.backend = backend
        self.tok = tok
        self.strategy = strategy
        self.config = config
        self.oracle_lengths = oracle_lengths
        self.pool = KvPool(config.max_sequence_length)
        self.main = ThreadState(0)
        self.threads: dict[int, ThreadState] = {0: self.main}
        self.unsynced: list[int] = []
        self.events: list[DecodeEvent] = []
        self.stats = RunStats()
        self.step_seconds: list[float] = []
        self._sync: tuple[int, int, int] | None = None

    # --- helpers --------------------------------------------------------------

    def _append(self, th: ThreadState, token: int, position: int, t: int) -> int:
        slot = self.pool.append(token, th.thread_id, position, t)
        th.owned_slots.append(slot)
        th.view.append(slot)
        return slot

    def _feeds(self, th: ThreadState) -> tuple[Feed, ...]:
        feeds = []
        for slot, owner in th.pending:
            view = self.threads[owner].view
            s = self.pool[slot]
            # every pending slot is last in its owner's view except prompt
            # tokens, whose visible prefix ends at the slot itself
            upto = slot + 1 if s.timestep == 0 else len(view)
            feeds.append(Feed(slot, s.token_id, s.position_id, view, upto))
        th.pending = []
        return tuple(feeds)

    def _oracle(self, fork_index: int) -> int | None:
        if self.oracle_lengths is None or fork_index >= len(self.oracle_lengths):
            return None
        return self.oracle_lengths[fork_index]

    # --- per-token handling -------------------------------------------------------

    def _main_token(self, token: int, t: int) -> int | None:
        main = self.main
        kind = self.tok.kind(token)
        if kind is Kind.EOS:
            main.status = Status.DONE
            return None
        pos = main.next_position
        main.next_position += 1
        if kind is Kind.SYNC:
            # held outside the pool until the wait ends
            main.status = Status.WAITING_AT_SYNC
            self._sync = (t, pos, len(self.events))
            self.events.append(DecodeEvent(t, 0, token, -1, pos))
            return None
        if kind in (Kind.ASYNC_OPEN, Kind.ASYNC_CLOSE):
            log.warning("main thread decoded %s at t=%d; treated as text", kind.value, t)
        slot = self._append(main, token, pos, t)
        main.pending = [(slot, 0)]
        self.events.append(DecodeEvent(t, 0, token, slot, pos))
        return slot if kind is Kind.PROMISE else None

    def _fork_token(self, th: ThreadState, token: int, t: int) -> None:
        kind = self.tok.kind(token)
        if kind is Kind.EOS:
            log.warning("fork %d decoded end-of-sequence at t=%d; closing it", th.thread_id, t)
            token, kind = ASYNC_CLOSE, Kind.ASYNC_CLOSE
        elif kind in (Kind.PROMISE, Kind.SYNC, Kind.ASYNC_OPEN):
            log.warning("fork %d decoded %s at t=%d; treated as text", th.thread_id, kind.value, t)
        pos = th.next_position
        th.next_position += 1
        th.decoded += 1
        slot = self._append(th, token, pos, t)
        th.pending = [(slot, th.thread_id)]
        self.events.append(DecodeEvent(t, th.thread_id, token, slot, pos))
        if kind is Kind.ASYNC_CLOSE:
            th.status = Status.DONE
        elif th.decoded >= self.config.fork_token_cap:
            raise RunawayFork(f"fork {th.thread_id} decoded {th.decoded} tokens without </async>")

    def _spawn(self, promise_slot: int, t: int) -> None:
        live = sum(1 for th in self.threads.values() if th.status is not Status.DONE)
        if live + 1 > self.config.max_threads:
            raise MaxThreadsExceeded(f"spawning at t={t} would exceed {self.config.max_threads} threads")
        fid = len(self.threads)
        topic, tokens = self.tok.promise_attrs(self.pool[promise_slot].token_id)
        offset = assign_position(self.strategy, Promise(topic, tokens, fid), self._oracle(fid - 1))
        p = self.pool[promise_slot].position_id
        fork = ThreadState(fid, spawn_slot=promise_slot, promise_ref=fid, view=list(self.main.view))
        self.threads[fid] = fork
        opener = self._append(fork, ASYNC_OPEN, p + 1, t)
        fork.pending = [(opener, fid)]
        fork.next_position = p + 2
        self.main.next_position = p + 1 + offset
        self.unsynced.append(fid)
        self.stats.spawns += 1
        self.stats.max_concurrent_threads = max(self.stats.max_concurrent_threads, live + 1)

    def _maybe_release(self, t: int) -> None:
        main = self.main
        if main.status is not Status.WAITING_AT_SYNC:
            return
        if any(self.threads[f].status is not Status.DONE for f in self.unsynced):
            return
        decoded_at, pos, event_index = self._sync
        pending: list[tuple[int, int]] = []
        for f in self.unsynced:
            fork = self.threads[f]
            # never behind a block that ran past its estimate
            pos = max(pos, fork.next_position)
            main.view.extend(fork.owned_slots)
            pending.extend(fork.pending)
            fork.pending = []
        slot = self._append(main, SYNC, pos, t)
        main.next_position = pos + 1
        self.events[event_index] = replace(self.events[event_index], slot=slot, position_id=pos)
        main.pending = pending + [(slot, 0)]
        main.status = Status.ACTIVE
        self.stats.sync_waits.append(t - decoded_at)
        self.unsynced = []
        self._sync = None

    # --- driver -----------------------------------------------------------------

    def execute(self) -> Transcript:
        self.backend.reset(self.config.max_sequence_length)
        for pos, token in enumerate(self.prompt):
            slot = self._append(self.main, token, pos, 0)
            self.main.pending.append((slot, 0))
        self.main.next_position = len(self.prompt)

        t = 0
        while True:
            active = [th for _, th in sorted(self.threads.items()) if th.status is Status.ACTIVE]
            if not active:
                break
            t += 1
            request = StepRequest(t, tuple(ThreadRequest(th.thread_id, self._feeds(th)) for th in active), self.pool)
            start = time.perf_counter()
            outputs = self.backend.step(request)
            self.step_seconds.append(time.perf_counter() - start)
            if [o.thread_id for o in outputs] != [th.thread_id for th in active]:
                raise BackendError(f"backend answered threads {[o.thread_id for o in outputs]} "
                                   f"for request {[th.thread_id for th in active]}")
            spawn = None
            for th, out in zip(active, outputs):
                if th.thread_id == 0:
                    spawn = self._main_token(out.token_id, t)
                else:
                    self._fork_token(th, out.token_id, t)
            if spawn is not None:
                self._spawn(spawn, t)
            self._maybe_release(t)
        return self._finish()

    def _finish(self) -> Transcript:
        forks_by_promise = {th.spawn_slot: th for th in self.threads.values() if th.thread_id}
        order: list[int] = []
        for slot in self.main.owned_slots:
            order.append(slot)
            if slot in forks_by_promise:
                order.extend(forks_by_promise[slot].owned_slots)
        self.pool.finalize(order)
        response = order[len(self.prompt):]
        return Transcript(
            prompt_tokens=self.prompt,
            events=tuple(self.events),
            logical_tokens=tuple(self.pool[s].token_id for s in response),
            logical_positions=tuple(self.pool[s].position_id for s in response),
            num_timesteps=max((e.timestep for e in self.events), default=0),
            stats=self.stats,
            step_seconds=tuple(self.step_seconds),
            logical_slots=tuple(response),
            pool=self.pool,
        )


def run(
    prompt_tokens: Sequence[int],
    backend: DecoderBackend,
    tok: Tokenizer,
    strategy: PositionStrategy = PositionStrategy(),
    config: InterpreterConfig = InterpreterConfig(),
    *,
    oracle_lengths: Sequence[int] | None = None,
) -> Transcript:
    """Decode one response asynchronously.

    ``oracle_lengths`` gives the realized length (contents plus ``</async>``)
    of each block in spawn order; the oracle position strategies require it.
    """
    return _Run(prompt_tokens, backend, tok, strategy, config, oracle_lengths).execute()
