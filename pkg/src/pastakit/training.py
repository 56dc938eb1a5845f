"""Supervised fine-tuning examples for annotated responses.

An annotated example differs from plain next-token data in three ways:

* attention: tokens after a promise cannot see its block until a sync;
  block tokens see what their promise sees plus their own block;
* positions: block tokens continue from their promise, and main tokens after
  the block skip ahead by the promise's length estimate;
* targets: a promise predicts the first token after its block.

Masks are stored per row as half-open ``[start, end)`` intervals of visible
columns, which stays compact because every row is a few contiguous runs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from pastakit.errors import AttributeMissing, FileUnreadable, InvalidAnnotation, MalformedRecord, PastaError
from pastakit.interpreter.positions import Kind as StrategyKind
from pastakit.interpreter.positions import PositionStrategy, assign_position
from pastakit.lang import AnnotatedResponse, Promise, parse_any, strip, validate
from pastakit.tokenizer import EOS, Kind, TokenInfo, Tokenizer

log = logging.getLogger(__name__)

IGNORE = -100
SFT_STRATEGY = PositionStrategy(StrategyKind.PRED10X)

Intervals = list[tuple[int, int]]


# --- attention ------------------------------------------------------------------

def _add(row: Intervals, start: int, end: int) -> None:
    if row and row[-1][1] == start:
        row[-1] = (row[-1][0], end)
    else:
        row.append((start, end))


def structural_mask(infos: Sequence[TokenInfo]) -> list[Intervals]:
    """Visible column intervals for every row of a serialized sequence."""
    rows: list[Intervals] = []
    synced_end = 0  # every column before this is visible to main
    runs: Intervals = []  # main-only runs after the last sync
    main_row: Intervals = []
    block_base: Intervals = []
    block_start = 0
    for i, info in enumerate(infos):
        if info.block is None:
            if info.kind is Kind.SYNC:
                synced_end, runs = i + 1, []
            else:
                _add(runs, i, i + 1)
            main_row = [(0, synced_end)] if synced_end else []
            for start, end in runs:
                _add(main_row, start, end)
            rows.append(main_row)
        else:
            if info.kind is Kind.ASYNC_OPEN:
                # the opener directly follows its promise, the latest main row
                block_base, block_start = list(main_row), i
            row = list(block_base)
            _add(row, block_start, i + 1)
            rows.append(row)
    return rows


def may_attend(infos: Sequence[TokenInfo], i: int, j: int) -> bool:
    """Pairwise visibility answered directly from the block structure.

    Deliberately naive; used to cross-check :func:`structural_mask`.
    """
    if j > i:
        return False
    bi = infos[i].block
    if bi is not None:
        start = min(k for k, x in enumerate(infos) if x.block == bi)
        if j >= start:
            return infos[j].block == bi
        return may_attend(infos, start - 1, j)
    bj = infos[j].block
    if bj is None:
        return True
    end = max(k for k, x in enumerate(infos) if x.block == bj)
    return any(infos[s].kind is Kind.SYNC and infos[s].block is None for s in range(end + 1, i + 1))


def dense(rows: Sequence[Intervals], n: int | None = None) -> np.ndarray:
    n = len(rows) if n is None else n
    out = np.zeros((len(rows), n), bool)
    for i, row in enumerate(rows):
        for start, end in row:
            out[i, start:end] = True
    return out


def causal_rows(n: int) -> list[Intervals]:
    return [[(0, i + 1)] for i in range(n)]


# --- positions ------------------------------------------------------------------

def block_lengths(infos: Sequence[TokenInfo]) -> list[int]:
    """Realized length of each block (contents plus ``</async>``) in order."""
    lengths: dict[int, int] = {}
    for info in infos:
        if info.block is not None and info.kind is not Kind.ASYNC_OPEN:
            lengths[info.block] = lengths.get(info.block, 0) + 1
    return [lengths[b] for b in sorted(lengths)]


def sft_positions(infos: Sequence[TokenInfo], tok: Tokenizer, strategy: PositionStrategy = SFT_STRATEGY,
                  start: int = 0) -> list[int]:
    """Position ids the interpreter would assign when replaying ``infos``."""
    actual = block_lengths(infos)
    out: list[int] = []
    main_next = start
    promise_pos = 0
    fork_next = 0
    unsynced: list[int] = []
    seen_blocks = 0
    for info in infos:
        if info.block is None:
            p = main_next
            if info.kind is Kind.SYNC:
                p = max([p, *unsynced])
                unsynced = []
            out.append(p)
            main_next = p + 1
            if info.kind is Kind.PROMISE:
                topic, tokens = tok.promise_attrs(info.id)
                if tokens is None:
                    raise AttributeMissing(f"promise {topic!r} has no tokens attribute")
                length = actual[seen_blocks] if seen_blocks < len(actual) else None
                offset = assign_position(strategy, Promise(topic, tokens, seen_blocks + 1), length)
                seen_blocks += 1
                promise_pos, main_next = p, p + 1 + offset
        else:
            if info.kind is Kind.ASYNC_OPEN:
                fork_next = promise_pos + 1
            out.append(fork_next)
            fork_next += 1
            if info.kind is Kind.ASYNC_CLOSE:
                unsynced.append(fork_next)
    return out


# --- targets --------------------------------------------------------------------

def sft_targets(infos: Sequence[TokenInfo], prompt_len: int) -> list[int]:
    n = len(infos)
    targets = [IGNORE] * n
    for i in range(max(prompt_len - 1, 0), n):
        info = infos[i]
        if info.kind is Kind.ASYNC_CLOSE:
            continue
        nxt = i + 1
        if info.kind is Kind.PROMISE and nxt < n and infos[nxt].kind is Kind.ASYNC_OPEN:
            block = infos[nxt].block
            while nxt < n and infos[nxt].block == block:
                nxt += 1
        targets[i] = infos[nxt].id if nxt < n else EOS
    return targets


# --- examples -------------------------------------------------------------------

@dataclass
class SftExample:
    input_ids: list[int]
    position_ids: list[int]
    targets: list[int]
    mask: list[Intervals] = field(repr=False)
    prompt_len: int = 0

    def __len__(self) -> int:
        return len(self.input_ids)

    def attention_mask(self) -> np.ndarray:
        return dense(self.mask, len(self.input_ids))

    def to_record(self) -> dict:
        return {
            "input_ids": self.input_ids,
            "position_ids": self.position_ids,
            "targets": self.targets,
            "mask": [[list(iv) for iv in row] for row in self.mask],
            "prompt_len": self.prompt_len,
        }


def _prompt_infos(prompt_tokens: Sequence[int]) -> list[TokenInfo]:
    return [TokenInfo(t, Kind.TEXT) for t in prompt_tokens]


def build_sft_example(prompt_tokens: Sequence[int], r: AnnotatedResponse, tok: Tokenizer,
                      strategy: PositionStrategy = SFT_STRATEGY) -> SftExample:
    errors = [d for d in validate(r) if d.severity == "error"]
    if errors:
        raise InvalidAnnotation("; ".join(d.message for d in errors))
    infos = _prompt_infos(prompt_tokens) + tok.encode_response(r)
    n_prompt = len(prompt_tokens)
    positions = list(range(n_prompt)) + sft_positions(infos[n_prompt:], tok, strategy, start=n_prompt)
    return SftExample(
        input_ids=[x.id for x in infos],
        position_ids=positions,
        targets=sft_targets(infos, n_prompt),
        mask=structural_mask(infos),
        prompt_len=n_prompt,
    )


def build_baseline_example(prompt_tokens: Sequence[int], r: AnnotatedResponse, tok: Tokenizer) -> SftExample:
    """Plain causal example over the response with all annotations removed."""
    ids = list(prompt_tokens) + tok.encode_text(strip(r))
    infos = [TokenInfo(t, Kind.TEXT) for t in ids]
    return SftExample(
        input_ids=ids,
        position_ids=list(range(len(ids))),
        targets=sft_targets(infos, len(prompt_tokens)),
        mask=causal_rows(len(ids)),
        prompt_len=len(prompt_tokens),
    )


# --- corpus ---------------------------------------------------------------------

RESPONSE_ROLES = ("chatbot", "gpt", "assistant")


@dataclass(frozen=True)
class CorpusRecord:
    line: int
    id: str
    prompt: str
    response_text: str
    baseline: str | None = None
    candidates: tuple[str, ...] = ()


@dataclass(frozen=True)
class CorpusDiagnostic:
    line: int
    code: str
    message: str


@dataclass
class Corpus:
    records: list[CorpusRecord] = field(default_factory=list)
    pairs: list[tuple[str, AnnotatedResponse]] = field(default_factory=list)
    diagnostics: list[CorpusDiagnostic] = field(default_factory=list)

    @property
    def skipped(self) -> int:
        return len(self.diagnostics)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for d in self.diagnostics:
            out[d.code] = out.get(d.code, 0) + 1
        return dict(sorted(out.items()))


def _turn_text(turn: object, line: int) -> tuple[str, str]:
    if not isinstance(turn, dict) or not isinstance(turn.get("value"), str):
        raise MalformedRecord(f"line {line}: each turn needs a string 'value'")
    return str(turn.get("from", "")).lower(), turn["value"]


def parse_record(obj: object, line: int) -> CorpusRecord:
    """Accepts ``{"conversations": [...], ...}`` or a bare list of turns."""
    meta: dict = {}
    if isinstance(obj, list):
        turns = obj
    elif isinstance(obj, dict) and isinstance(obj.get("conversations"), list):
        turns, meta = obj["conversations"], obj
    else:
        raise MalformedRecord(f"line {line}: expected a conversation")
    prompt = response = None
    for turn in turns:
        role, value = _turn_text(turn, line)
        if role == "human" and prompt is None:
            prompt = value
        elif role in RESPONSE_ROLES and response is None:
            response = value
    if prompt is None or response is None:
        raise MalformedRecord(f"line {line}: conversation needs a human turn and a response turn")
    baseline = meta.get("baseline")
    if baseline is not None and not isinstance(baseline, str):
        raise MalformedRecord(f"line {line}: 'baseline' must be a string")
    candidates = meta.get("candidates", [])
    if not isinstance(candidates, list) or not all(isinstance(c, str) for c in candidates):
        raise MalformedRecord(f"line {line}: 'candidates' must be a list of strings")
    return CorpusRecord(line, str(meta.get("id", line)), prompt, response, baseline, tuple(candidates))


def iter_lines(path: str | Path) -> Iterator[tuple[int, str]]:
    try:
        with open(path, encoding="utf-8") as fp:
            for n, text in enumerate(fp, start=1):
                if text.strip():
                    yield n, text
    except (OSError, UnicodeDecodeError) as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc


def ingest_corpus(path: str | Path, tok: Tokenizer) -> Corpus:
    """Parse every record; bad records are skipped and counted, never fatal."""
    corpus = Corpus()
    for line, text in iter_lines(path):
        try:
            rec = parse_record(json.loads(text), line)
            r = parse_any(rec.response_text, tok)
            errors = [d for d in validate(r) if d.severity == "error"]
            if errors:
                raise InvalidAnnotation("; ".join(d.message for d in errors))
        except json.JSONDecodeError as exc:
            corpus.diagnostics.append(CorpusDiagnostic(line, "MalformedRecord", f"invalid JSON: {exc.msg}"))
            continue
        except PastaError as exc:
            corpus.diagnostics.append(CorpusDiagnostic(line, type(exc).__name__, str(exc)))
            continue
        corpus.records.append(rec)
        corpus.pairs.append((rec.prompt, r))
    if corpus.diagnostics:
        log.info("%s: skipped %d of %d records", path, corpus.skipped, corpus.skipped + len(corpus.pairs))
    return corpus
