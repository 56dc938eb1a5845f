import io
import json
import logging
import random

import pytest

from oracles import SINGLE, TWO
from pastakit import plan, synth
from pastakit.backends import ScriptedBackend
from pastakit.backends.base import StepOutput
from pastakit.errors import (
    BackendError,
    MaxThreadsExceeded,
    MissingOracleLength,
    PoolOverflow,
    RowExhausted,
    RunawayFork,
    ScriptExhausted,
)
from pastakit.interpreter import InterpreterConfig, PositionStrategy, naive_run, run
from pastakit.interpreter.positions import Kind as S
from pastakit.lang import parse, serialize
from pastakit.tokenizer import ASYNC_CLOSE, EOS, SYNC


def decode(text, tok, strategy=PositionStrategy(), config=InterpreterConfig(), prompt="", runner=run, **kw):
    r = parse(text)
    b = ScriptedBackend.from_response(r, tok, **kw)
    b.record_requests = True
    tr = runner(tok.encode_text(prompt), b, tok, strategy, config, oracle_lengths=b.oracle_lengths)
    return tr, b


def programs(n, offset=0, cfg=synth.SynthConfig()):
    for seed in range(offset, offset + n):
        rng = random.Random(seed)
        yield seed, synth.random_program(rng, cfg), synth.random_prompt(rng)


def test_sequential(tok):
    tr, _ = decode("A B", tok)
    assert tr.num_timesteps == 2
    assert tr.text(tok) == "A B"
    assert [e.thread_id for e in tr.events] == [0, 0]


def test_single_fork_schedule(tok):
    tr, _ = decode(SINGLE, tok)
    by_thread = {}
    for e in tr.events:
        by_thread.setdefault(e.thread_id, []).append((e.timestep, tok.detokenize([e.token_id]).strip()))
    assert by_thread[0] == [(1, "A"), (2, "B"), (3, by_thread[0][2][1]), (4, "F"), (5, "<sync/>"), (8, "G")]
    assert by_thread[1] == [(4, "C"), (5, "D"), (6, "E"), (7, "</async>")]
    assert tr.stats.sync_waits == [2]
    assert tr.stats.spawns == 1 and tr.stats.max_concurrent_threads == 2
    assert tr.text(tok) == SINGLE
    assert tr.num_timesteps == 8


def test_two_forks_resume_after_last_close(tok):
    tr, _ = decode(TWO, tok)
    closes = [e.timestep for e in tr.events if e.token_id == ASYNC_CLOSE]
    last_main = [e for e in tr.events if e.thread_id == 0][-1]
    assert closes == [13, 14]
    assert last_main.timestep == 1 + max(closes) == 15
    assert tr.stats.max_concurrent_threads == 3


def test_sync_correctness_and_zero_cost(tok):
    for seed, text, prompt in programs(200):
        tr, _ = decode(text, tok, prompt=prompt)
        assert tr.text(tok) == text, seed
        assert tr.num_timesteps == plan.critical_path(plan.build_graph(parse(text), tok)), seed
        unsynced_close = []
        waiting_since_sync = None
        for e in tr.events:
            if e.thread_id and e.token_id == ASYNC_CLOSE:
                unsynced_close.append(e.timestep)
            elif e.thread_id == 0 and e.token_id == SYNC:
                waiting_since_sync = list(unsynced_close)
                unsynced_close = []
            elif e.thread_id == 0 and waiting_since_sync is not None:
                assert e.timestep >= 1 + max(waiting_since_sync, default=0), seed
                waiting_since_sync = None


def test_logical_finalization(tok):
    for seed, text, prompt in programs(100):
        tr, _ = decode(text, tok, prompt=prompt)
        order = tr.pool.logical_order()
        n_prompt = len(tr.prompt_tokens)
        assert tok.detokenize([tr.pool[s].token_id for s in order[n_prompt:]]) == text
        assert sorted(s.logical_rank for s in tr.pool.slots) == list(range(len(tr.pool)))


def release_slot(pool, fork_slots):
    last = max(fork_slots)
    return next((i for i in range(last + 1, len(pool)) if pool[i].token_id == SYNC and pool[i].thread_id == 0),
                None)


def check_masks(tr, requests):
    pool = tr.pool
    owned: dict[int, list[int]] = {}
    for i, s in enumerate(pool.slots):
        owned.setdefault(s.thread_id, []).append(i)
    spawn = {f: slots[0] - 1 for f, slots in owned.items() if f}
    released = {f: release_slot(pool, slots) for f, slots in owned.items() if f}
    # the promise of fork f is the newest main slot before its opener
    promise = {f: max(i for i in owned[0] if i < owned[f][0]) for f in spawn}
    for req in requests:
        for th in req.threads:
            for feed in th.feeds:
                o = pool[feed.slot].thread_id
                for v in feed.visible:
                    vo = pool[v].thread_id
                    if o:
                        ok = vo == o or (v <= promise[o] and (vo == 0 or (released[vo] is not None
                                                                         and released[vo] < promise[o])))
                    else:
                        ok = vo == 0 or (released[vo] is not None and released[vo] <= feed.slot)
                    assert ok, (feed.slot, v)
                assert feed.slot in feed.visible


def test_mask_soundness(tok):
    for seed, text, prompt in programs(100):
        tr, b = decode(text, tok, prompt=prompt)
        check_masks(tr, b.requests)


def feeds_by_token(b, tok, word):
    out = []
    for req in b.requests:
        for th in req.threads:
            for f in th.feeds:
                if tok.detokenize([f.token_id]).strip() == word:
                    out.append(f)
    return out


def test_fork_visibility_excludes_later_main_and_siblings(tok):
    text = ('To <promise topic="a" tokens="10"/><async>find it</async>'
            '<promise topic="b" tokens="10"/><async>other</async><sync/> segment done')
    tr, b = decode(text, tok)
    pool = tr.pool
    (find,) = feeds_by_token(b, tok, "find")
    visible_tokens = {tok.detokenize([pool[s].token_id]).strip() for s in find.visible}
    assert {"To", "<async>", "find"} <= visible_tokens
    assert "other" not in visible_tokens and "<sync/>" not in visible_tokens
    second_promise = [i for i, s in enumerate(pool.slots) if tok.kind(s.token_id).value == "promise"][1]
    assert second_promise not in find.visible
    second_open = [i for i, s in enumerate(pool.slots) if s.thread_id == 2][0]
    assert second_open not in find.visible
    (segment,) = feeds_by_token(b, tok, "segment")
    assert segment.visible == frozenset(range(segment.slot + 1))


def test_main_between_promise_and_sync_is_blind(tok):
    tr, b = decode(SINGLE, tok)
    (f,) = feeds_by_token(b, tok, "F")
    assert all(tr.pool[s].thread_id == 0 for s in f.visible)
    (g,) = feeds_by_token(b, tok, "G")
    assert g.visible == frozenset(range(g.slot + 1))


def test_pool_interleaving(tok):
    tr, _ = decode(TWO, tok)
    pool = tr.pool
    times = [s.timestep for s in pool.slots]
    assert times == sorted(times)
    seen = set()
    for s in pool.slots:
        assert (s.thread_id, s.timestep, s.token_id == SYNC) not in seen
        seen.add((s.thread_id, s.timestep, s.token_id == SYNC))
    # main is parked at the sync, so the two forks alternate slot by slot
    window = [s.thread_id for s in pool.slots if 5 <= s.timestep <= 13]
    assert window == [1, 2] * 9


def test_differential_against_naive(tok):
    strategies = [PositionStrategy.parse(s) for s in ("pred10x", "fixed:40", "oracle-exact", "pred1x", "oracle10x")]
    for seed, text, prompt in programs(200):
        strategy = strategies[seed % len(strategies)]
        a, _ = decode(text, tok, strategy, prompt=prompt)
        b, _ = decode(text, tok, strategy, prompt=prompt, runner=naive_run)
        assert a.token_stream() == b.token_stream(), seed
        assert a.logical_tokens == b.logical_tokens and a.logical_positions == b.logical_positions, seed


def test_unannotated_streams_identical(tok):
    a, _ = decode("just plain words here", tok)
    b, _ = decode("just plain words here", tok, runner=naive_run)
    assert a.token_stream() == b.token_stream() and a.num_timesteps == 4


def test_deterministic(tok):
    a, _ = decode(TWO, tok)
    b, _ = decode(TWO, tok)
    assert a.events == b.events and a.logical_positions == b.logical_positions


# --- positions ----------------------------------------------------------------

GAP = 'P <promise topic="g" tokens="10"/><async>w w w w w w w w</async> F G <sync/> H'


@pytest.mark.parametrize("strategy, gap", [("oracle-exact", 0), ("oracle1x", 0), ("pred10x", 1),
                                           ("fixed:40", 31), ("oracle10x", 1), ("pred1x", 1)])
def test_gap_arithmetic(tok, strategy, gap):
    tr, _ = decode(GAP, tok, PositionStrategy.parse(strategy))
    gaps = tr.position_gaps()
    # P, the promise, <async>, 8 words and </async> are contiguous; F, G, <sync/>, H carry the gap
    assert gaps[:12] == [0] * 12
    assert gaps[12:] == [gap] * 4


def test_oracle_exact_zero_gaps(tok):
    for text in (SINGLE, TWO, GAP):
        tr, _ = decode(text, tok, PositionStrategy(S.ORACLE_EXACT))
        assert set(tr.position_gaps()) == {0}
    for seed, text, prompt in programs(100):
        tr, _ = decode(text, tok, PositionStrategy(S.ORACLE_EXACT), prompt=prompt)
        assert set(tr.position_gaps()) <= {0}, seed


def test_sync_waits_for_underestimated_block(tok):
    text = 'a <promise topic="t" tokens="10"/><async>' + " ".join(["w"] * 30) + "</async><sync/> b"
    tr, _ = decode(text, tok, PositionStrategy.parse("pred10x"))
    block_end = max(p for p, e in zip(tr.logical_positions, tr.logical_tokens) if e == ASYNC_CLOSE)
    sync_pos = tr.logical_positions[tr.logical_tokens.index(SYNC)]
    assert sync_pos == block_end + 1
    assert tr.logical_positions[-1] == sync_pos + 1


def test_oracle_needs_lengths(tok):
    r = parse(SINGLE)
    with pytest.raises(MissingOracleLength):
        run([], ScriptedBackend.from_response(r, tok), tok, PositionStrategy(S.ORACLE_EXACT))


# --- errors ---------------------------------------------------------------------

def test_pool_overflow(tok):
    with pytest.raises(PoolOverflow):
        decode(TWO, tok, config=InterpreterConfig(max_sequence_length=10))


def test_max_threads(tok):
    with pytest.raises(MaxThreadsExceeded):
        decode(TWO, tok, config=InterpreterConfig(max_threads=2))


def test_rows_exhausted(tok):
    with pytest.raises(RowExhausted):
        decode(TWO, tok, config=InterpreterConfig(max_threads=2), runner=naive_run)
    # rows come back at a sync, so sequential forks fit in two rows
    text = ('a <promise topic="x" tokens="10"/><async>b</async><sync/> c '
            '<promise topic="y" tokens="10"/><async>d</async><sync/> e')
    tr, _ = decode(text, tok, config=InterpreterConfig(max_threads=2), runner=naive_run)
    assert tr.text(tok) == text


def test_runaway_fork(tok):
    text = '<promise topic="x" tokens="10"/><async>' + " ".join(["w"] * 20) + "</async><sync/>"
    with pytest.raises(RunawayFork):
        decode(text, tok, config=InterpreterConfig(fork_token_cap=5))


def test_script_exhausted(tok):
    b = ScriptedBackend(tok.encode_text("a b"))
    with pytest.raises(ScriptExhausted):
        run([], b, tok)


def test_backend_answer_order_checked(tok):
    class Bad(ScriptedBackend):
        def step(self, request):
            return [StepOutput(99, EOS)]

    with pytest.raises(BackendError):
        run([], Bad([EOS]), tok)


def test_fork_eos_closes_fork(tok, caplog):
    r = parse(SINGLE)
    b = ScriptedBackend.from_response(r, tok)
    b.forks[0][-1] = EOS
    with caplog.at_level(logging.WARNING):
        tr = run([], b, tok)
    assert tr.text(tok) == SINGLE
    assert "closing it" in caplog.text


def test_sync_without_forks_is_free(tok):
    tr, _ = decode("a <sync/> b", tok)
    assert tr.num_timesteps == 3 and tr.stats.sync_waits == [0]


def test_trace_format(tok):
    tr, _ = decode(SINGLE, tok)
    buf = io.StringIO()
    tr.write_trace(buf)
    lines = [json.loads(x) for x in buf.getvalue().splitlines()]
    assert len(lines) == len(tr.events)
    assert set(lines[0]) == {"t", "thread", "token", "slot", "pos"}
    assert all(x["slot"] >= 0 for x in lines)


def test_prompt_is_prefilled(tok):
    tr, b = decode(SINGLE, tok, prompt="why is that")
    first = b.requests[0].threads[0].feeds
    assert [f.slot for f in first] == [0, 1, 2]
    assert first[0].visible == {0} and first[2].visible == {0, 1, 2}
    assert tr.text(tok) == serialize(parse(SINGLE))
