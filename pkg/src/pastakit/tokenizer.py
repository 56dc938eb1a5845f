"""Token vocabulary with the annotation tags as atomic control tokens.

Token ids 0-3 are fixed: end-of-sequence, ``<async>``, ``</async>`` and
``<sync/>``. Every distinct promise tag (topic and tokens attribute included)
is interned as one further atomic id, so a promise always costs exactly one
decode step.

Two text modes exist. ``whitespace`` interns whitespace-delimited pieces on
the fly; a piece keeps its surrounding whitespace so that decoding reproduces
the input byte for byte. ``provided`` wraps caller-supplied ``encode``/``decode``
functions over a fixed text vocabulary (see :meth:`Tokenizer.bytes`).
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Callable, Sequence

from pastakit import lang
from pastakit.errors import PastaError

EOS = 0
ASYNC_OPEN = 1
ASYNC_CLOSE = 2
SYNC = 3
NUM_FIXED = 4

_PIECE_RE = re.compile(r"\s*\S+\s*|\s+")


class Kind(enum.Enum):
    TEXT = "text"
    PROMISE = "promise"
    ASYNC_OPEN = "async_open"
    ASYNC_CLOSE = "async_close"
    SYNC = "sync"
    EOS = "eos"


_FIXED_KINDS = {EOS: Kind.EOS, ASYNC_OPEN: Kind.ASYNC_OPEN, ASYNC_CLOSE: Kind.ASYNC_CLOSE, SYNC: Kind.SYNC}
_FIXED_STRINGS = {EOS: "", ASYNC_OPEN: "<async>", ASYNC_CLOSE: "</async>", SYNC: "<sync/>"}

CONTROL_KINDS = frozenset({Kind.PROMISE, Kind.ASYNC_OPEN, Kind.ASYNC_CLOSE, Kind.SYNC, Kind.EOS})


@dataclass(frozen=True)
class TokenInfo:
    """One token of a tokenized response in serialized order.

    ``block`` is the 1-based async block the token belongs to (its inserted
    ``<async>``, contents and ``</async>``) or ``None`` on the main thread.
    """

    id: int
    kind: Kind
    block: int | None = None

    @property
    def is_control(self) -> bool:
        return self.kind in CONTROL_KINDS


class Tokenizer:
    def __init__(
        self,
        mode: str = "whitespace",
        *,
        encode: Callable[[str], list[int]] | None = None,
        decode: Callable[[Sequence[int]], str] | None = None,
        text_vocab_size: int | None = None,
    ):
        if mode not in ("whitespace", "provided"):
            raise ValueError(f"unknown tokenizer mode {mode!r}")
        if mode == "provided" and (encode is None or decode is None or text_vocab_size is None):
            raise ValueError("provided mode needs encode, decode and text_vocab_size")
        self.mode = mode
        self._encode = encode
        self._decode = decode
        self._text_vocab = text_vocab_size or 0
        # dynamic entries: whitespace pieces (whitespace mode) and promise tags
        self._pieces: list[str] = []
        self._piece_ids: dict[str, int] = {}
        self._promises: dict[int, tuple[str, int]] = {}

    @classmethod
    def bytes(cls) -> Tokenizer:
        """UTF-8 byte-level tokenizer: 256 text ids plus the control tokens."""
        return cls(
            "provided",
            encode=lambda s: list(s.encode("utf-8")),
            decode=lambda ids: bytes(ids).decode("utf-8", errors="strict"),
            text_vocab_size=256,
        )

    # --- vocabulary ---------------------------------------------------------

    @property
    def _dynamic_base(self) -> int:
        return NUM_FIXED + self._text_vocab

    @property
    def vocab_size(self) -> int:
        return self._dynamic_base + len(self._pieces)

    def _intern(self, piece: str) -> int:
        tid = self._piece_ids.get(piece)
        if tid is None:
            tid = self._dynamic_base + len(self._pieces)
            self._pieces.append(piece)
            self._piece_ids[piece] = tid
        return tid

    def promise_id(self, topic: str, tokens: int) -> int:
        tid = self._intern(lang.promise_tag(topic, tokens))
        self._promises[tid] = (topic, tokens)
        return tid

    def kind(self, tid: int) -> Kind:
        if tid in _FIXED_KINDS:
            return _FIXED_KINDS[tid]
        if tid in self._promises:
            return Kind.PROMISE
        if 0 <= tid < self.vocab_size:
            return Kind.TEXT
        raise PastaError(f"token id {tid} is not in the vocabulary")

    def is_control(self, tid: int) -> bool:
        return self.kind(tid) in CONTROL_KINDS

    def promise_attrs(self, tid: int) -> tuple[str, int]:
        return self._promises[tid]

    # --- text -----------------------------------------------------------------

    def encode_text(self, text: str) -> list[int]:
        if not text:
            return []
        if self.mode == "whitespace":
            return [self._intern(p) for p in _PIECE_RE.findall(text)]
        return [NUM_FIXED + i for i in self._encode(text)]

    def _decode_text(self, ids: list[int]) -> str:
        if self.mode == "whitespace":
            return "".join(self._pieces[i - self._dynamic_base] for i in ids)
        return self._decode([i - NUM_FIXED for i in ids])

    def tokenize(self, text: str) -> list[int]:
        """Lexical tokenization: tags become control ids, the rest is text."""
        ids: list[int] = []
        for lx in lang.lex(text):
            if lx.kind == "promise":
                try:
                    p = lang._promise_from_attrs(lx.attrs, 0, lx.offset)
                except lang.MalformedAttribute:
                    ids.extend(self.encode_text(lx.raw))
                    continue
                if lx.raw == lang.promise_tag(p.topic, p.tokens):
                    ids.append(self.promise_id(p.topic, p.tokens))
                else:
                    ids.extend(self.encode_text(lx.raw))
            elif lx.kind == "open" and lx.raw == "<async>":
                ids.append(ASYNC_OPEN)
            elif lx.kind == "close" and lx.raw == "</async>":
                ids.append(ASYNC_CLOSE)
            elif lx.kind == "sync" and lx.raw == "<sync/>":
                ids.append(SYNC)
            else:
                ids.extend(self.encode_text(lx.raw))
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        out: list[str] = []
        run: list[int] = []
        for tid in ids:
            kind = self.kind(tid)
            if kind is Kind.TEXT and tid not in self._promises:
                run.append(tid)
                continue
            if run:
                out.append(self._decode_text(run))
                run = []
            if kind is Kind.PROMISE:
                out.append(self._pieces[tid - self._dynamic_base])
            else:
                out.append(_FIXED_STRINGS[tid])
        if run:
            out.append(self._decode_text(run))
        return "".join(out)

    # --- structured -------------------------------------------------------------

    def encode_response(self, r: lang.AnnotatedResponse) -> list[TokenInfo]:
        """Tokens of ``r`` in serialized order, tagged with their thread region."""
        out: list[TokenInfo] = []
        for seg in r.segments:
            if isinstance(seg, lang.TextRun):
                out.extend(TokenInfo(t, Kind.TEXT) for t in self.encode_text(seg.text))
            elif isinstance(seg, lang.Promise):
                out.append(TokenInfo(self.promise_id(seg.topic, seg.tokens), Kind.PROMISE))
            elif isinstance(seg, lang.AsyncBlock):
                b = seg.block_id
                out.append(TokenInfo(ASYNC_OPEN, Kind.ASYNC_OPEN, b))
                out.extend(TokenInfo(t, Kind.TEXT, b) for t in self.encode_text(seg.text))
                out.append(TokenInfo(ASYNC_CLOSE, Kind.ASYNC_CLOSE, b))
            else:
                out.append(TokenInfo(SYNC, Kind.SYNC))
        return out

    def count(self, text: str) -> int:
        return len(self.encode_text(text))
