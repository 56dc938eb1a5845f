"""Parsing, serialization and conversion of annotated responses.

Two textual forms are handled. The canonical form is what a model emits at
inference time::

    A <promise topic="x" tokens="10"/><async>C D</async> F <sync/> G

The inline form is what the annotation dataset uses: async blocks carry the
topic themselves and there are no promise tags::

    A <async topic='x'>C D</async> F <sync/> G

Only these tags are recognized; any other markup is ordinary text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator, Union

from pastakit.errors import (
    MalformedAttribute,
    MissingTopic,
    NestedAsync,
    OrphanAsync,
    PromiseWithoutBlock,
    UnbalancedAsync,
)

if TYPE_CHECKING:
    from pastakit.tokenizer import Tokenizer

MIN_TOKENS_ATTR = 10
TOPIC_WARN_WORDS = 3
TOPIC_MAX_WORDS = 8

_TAG_RE = re.compile(
    r"<promise(?=[\s/>])[^<>]*>"
    r"|<async(?=[\s>])[^<>]*>"
    r"|</async\s*>"
    r"|<sync\s*/>"
)
_ATTR_RE = re.compile(r"""\s*([A-Za-z_][\w-]*)\s*=\s*(?:"([^"]*)"|'([^']*)')""")


# --- tree ------------------------------------------------------------------

@dataclass(frozen=True)
class TextRun:
    text: str


@dataclass(frozen=True)
class Promise:
    topic: str
    tokens: int
    block_id: int


@dataclass(frozen=True)
class AsyncBlock:
    block_id: int
    text: str


@dataclass(frozen=True)
class Sync:
    pass


Segment = Union[TextRun, Promise, AsyncBlock, Sync]


@dataclass(frozen=True)
class AnnotatedResponse:
    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    @property
    def promises(self) -> list[Promise]:
        return [s for s in self.segments if isinstance(s, Promise)]

    @property
    def blocks(self) -> list[AsyncBlock]:
        return [s for s in self.segments if isinstance(s, AsyncBlock)]

    @property
    def is_annotated(self) -> bool:
        return any(not isinstance(s, TextRun) for s in self.segments)

    def __str__(self) -> str:
        return serialize(self)


# --- lexing ----------------------------------------------------------------

@dataclass(frozen=True)
class Lexeme:
    kind: str  # "text" | "promise" | "open" | "close" | "sync"
    raw: str
    offset: int
    attrs: dict = field(default_factory=dict, compare=False)


def _parse_attrs(body: str, offset: int) -> dict[str, str]:
    attrs: dict[str, str] = {}
    pos = 0
    while pos < len(body):
        if body[pos:].strip() == "":
            break
        m = _ATTR_RE.match(body, pos)
        if not m:
            raise MalformedAttribute(f"cannot parse attributes in {body!r}", offset)
        name = m.group(1)
        value = m.group(2) if m.group(2) is not None else m.group(3)
        if name in attrs:
            raise MalformedAttribute(f"duplicate attribute {name!r}", offset)
        attrs[name] = value
        pos = m.end()
    return attrs


def lex(text: str) -> Iterator[Lexeme]:
    """Split text into tag and text lexemes. Attribute errors raise here."""
    pos = 0
    for m in _TAG_RE.finditer(text):
        if m.start() > pos:
            yield Lexeme("text", text[pos:m.start()], pos)
        raw = m.group(0)
        if raw.startswith("<promise"):
            if not raw.endswith("/>"):
                raise MalformedAttribute("promise tag must be self-closing", m.start())
            attrs = _parse_attrs(raw[len("<promise"):-2], m.start())
            yield Lexeme("promise", raw, m.start(), attrs)
        elif raw.startswith("</"):
            yield Lexeme("close", raw, m.start())
        elif raw.startswith("<async"):
            body = raw[len("<async"):-1]
            if body.rstrip().endswith("/"):
                raise MalformedAttribute("async tag cannot be self-closing", m.start())
            yield Lexeme("open", raw, m.start(), _parse_attrs(body, m.start()))
        else:
            yield Lexeme("sync", raw, m.start())
        pos = m.end()
    if pos < len(text):
        yield Lexeme("text", text[pos:], pos)


def _promise_from_attrs(attrs: dict[str, str], block_id: int, offset: int) -> Promise:
    unknown = set(attrs) - {"topic", "tokens"}
    if unknown:
        raise MalformedAttribute(f"unknown promise attribute(s) {sorted(unknown)}", offset)
    if "topic" not in attrs:
        raise MalformedAttribute("promise is missing the topic attribute", offset)
    if "tokens" not in attrs:
        raise MalformedAttribute("promise is missing the tokens attribute", offset)
    topic = attrs["topic"]
    if not topic.strip():
        raise MalformedAttribute("promise topic is empty", offset)
    raw_tokens = attrs["tokens"]
    if not re.fullmatch(r"\d+", raw_tokens):
        raise MalformedAttribute(f"tokens must be a non-negative integer, got {raw_tokens!r}", offset)
    return Promise(topic, int(raw_tokens), block_id)


# --- parse / serialize -----------------------------------------------------

class _Builder:
    """Shared structural checks for the canonical and inline parsers."""

    def __init__(self):
        self.segments: list[Segment] = []
        self.pending: Promise | None = None
        self.pending_offset = 0
        self.block: list[str] | None = None
        self.block_id = 0
        self.next_id = 1

    def text(self, lx: Lexeme):
        if self.block is not None:
            self.block.append(lx.raw)
        elif self.pending is not None:
            raise PromiseWithoutBlock("promise must be immediately followed by <async>", self.pending_offset)
        elif self.segments and isinstance(self.segments[-1], TextRun):
            self.segments[-1] = TextRun(self.segments[-1].text + lx.raw)
        else:
            self.segments.append(TextRun(lx.raw))

    def promise(self, p: Promise, offset: int):
        if self.block is not None:
            raise NestedAsync("promise inside an async block", offset)
        if self.pending is not None:
            raise PromiseWithoutBlock("promise must be immediately followed by <async>", self.pending_offset)
        self.pending = p
        self.pending_offset = offset
        self.next_id += 1

    def open(self, offset: int, block_id: int | None = None):
        if self.block is not None:
            raise NestedAsync("nested <async> block", offset)
        if block_id is None:
            if self.pending is None:
                raise OrphanAsync("<async> block without a preceding promise", offset)
            self.segments.append(self.pending)
            block_id = self.pending.block_id
            self.pending = None
        self.block_id = block_id
        self.block = []

    def close(self, offset: int):
        if self.block is None:
            raise UnbalancedAsync("</async> without a matching <async>", offset)
        self.segments.append(AsyncBlock(self.block_id, "".join(self.block)))
        self.block = None

    def sync(self, offset: int):
        if self.block is not None:
            raise NestedAsync("<sync/> inside an async block", offset)
        if self.pending is not None:
            raise PromiseWithoutBlock("promise must be immediately followed by <async>", self.pending_offset)
        self.segments.append(Sync())

    def finish(self, length: int) -> AnnotatedResponse:
        if self.block is not None:
            raise UnbalancedAsync("<async> block is never closed", length)
        if self.pending is not None:
            raise PromiseWithoutBlock("promise has no async block", self.pending_offset)
        return AnnotatedResponse(tuple(self.segments))


def parse(text: str) -> AnnotatedResponse:
    """Parse canonical annotated text into a response tree."""
    b = _Builder()
    for lx in lex(text):
        if lx.kind == "text":
            b.text(lx)
        elif lx.kind == "promise":
            b.promise(_promise_from_attrs(lx.attrs, b.next_id, lx.offset), lx.offset)
        elif lx.kind == "open":
            if lx.attrs:
                if b.pending is None:
                    raise OrphanAsync("inline <async topic=...> block; convert it with from_inline", lx.offset)
                raise MalformedAttribute("canonical <async> takes no attributes", lx.offset)
            b.open(lx.offset)
        elif lx.kind == "close":
            b.close(lx.offset)
        else:
            b.sync(lx.offset)
    return b.finish(len(text))


def _quote(value: str) -> str:
    return f"'{value}'" if '"' in value else f'"{value}"'


def promise_tag(topic: str, tokens: int) -> str:
    return f"<promise topic={_quote(topic)} tokens=\"{tokens}\"/>"


def serialize(r: AnnotatedResponse) -> str:
    out = []
    for seg in r.segments:
        if isinstance(seg, TextRun):
            out.append(seg.text)
        elif isinstance(seg, Promise):
            out.append(promise_tag(seg.topic, seg.tokens))
        elif isinstance(seg, AsyncBlock):
            out.append(f"<async>{seg.text}</async>")
        else:
            out.append("<sync/>")
    return "".join(out)


def to_inline(r: AnnotatedResponse) -> str:
    """Render in the dataset's inline form (topic on the async tag, no promises)."""
    topics = {p.block_id: p.topic for p in r.promises}
    out = []
    for seg in r.segments:
        if isinstance(seg, TextRun):
            out.append(seg.text)
        elif isinstance(seg, AsyncBlock):
            topic = topics[seg.block_id]
            quoted = f'"{topic}"' if "'" in topic else f"'{topic}'"
            out.append(f"<async topic={quoted}>{seg.text}</async>")
        elif isinstance(seg, Sync):
            out.append("<sync/>")
    return "".join(out)


def strip(r: AnnotatedResponse) -> str:
    """Remove all tags, keeping async contents inline where they were.

    Every seam left by a removed tag becomes exactly one space, so adjacent
    blocks never fuse into one word.
    """
    out = ""
    for seg in r.segments:
        if not isinstance(seg, (TextRun, AsyncBlock)) or not seg.text:
            continue
        if not out:
            out = seg.text
            continue
        left, right = out.rstrip(), seg.text.lstrip()
        out = f"{left} {right}" if left else f" {right}"
    return out


def round10(n: int) -> int:
    """Nearest multiple of ten, ties rounding up, never below ``MIN_TOKENS_ATTR``."""
    return max(MIN_TOKENS_ATTR, 10 * ((n + 5) // 10))


def from_inline(text: str, tok: Tokenizer) -> AnnotatedResponse:
    """Convert inline dataset text into the canonical form.

    Each inline block gets a promise whose ``tokens`` estimate is the block's
    token count plus its closing tag, rounded with :func:`round10`.
    """
    b = _Builder()
    topics: list[str] = []
    for lx in lex(text):
        if lx.kind == "text":
            b.text(lx)
        elif lx.kind == "promise":
            raise MalformedAttribute("inline form does not use promise tags", lx.offset)
        elif lx.kind == "open":
            topic = lx.attrs.get("topic")
            if topic is None or not topic.strip():
                raise MissingTopic("inline <async> block needs a topic", lx.offset)
            if set(lx.attrs) - {"topic"}:
                raise MalformedAttribute(f"unknown async attribute(s) in {lx.raw!r}", lx.offset)
            b.open(lx.offset, block_id=b.next_id)
            b.next_id += 1
            topics.append(topic)
        elif lx.kind == "close":
            b.close(lx.offset)
        else:
            b.sync(lx.offset)
    inline = b.finish(len(text))

    segments: list[Segment] = []
    for seg in inline.segments:
        if isinstance(seg, AsyncBlock):
            n = len(tok.encode_text(seg.text)) + 1
            segments.append(Promise(topics[seg.block_id - 1], round10(n), seg.block_id))
        segments.append(seg)
    return AnnotatedResponse(tuple(segments))


def parse_any(text: str, tok: Tokenizer) -> AnnotatedResponse:
    """Parse either form, picking inline conversion when no promise tag is present."""
    if "<promise" not in text and re.search(r"<async\s+topic\s*=", text):
        return from_inline(text, tok)
    return parse(text)


# --- validation --------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "warning" | "error"
    code: str
    message: str


def validate(r: AnnotatedResponse) -> list[Diagnostic]:
    """Soft checks that hold for well-formed annotations but are not parse errors."""
    diags: list[Diagnostic] = []
    for p in r.promises:
        words = len(p.topic.split())
        if words > TOPIC_MAX_WORDS:
            diags.append(Diagnostic("error", "TopicTooLong", f"topic {p.topic!r} has {words} words (max {TOPIC_MAX_WORDS})"))
        elif words > TOPIC_WARN_WORDS:
            diags.append(Diagnostic("warning", "TopicVerbose", f"topic {p.topic!r} has {words} words"))
        if p.tokens % 10:
            diags.append(Diagnostic("warning", "TokensNotMultipleOf10", f"block {p.block_id}: tokens={p.tokens}"))
        if p.tokens < MIN_TOKENS_ATTR:
            diags.append(Diagnostic("warning", "TokensBelowMinimum", f"block {p.block_id}: tokens={p.tokens}"))
    last_block = max((i for i, s in enumerate(r.segments) if isinstance(s, AsyncBlock)), default=None)
    if last_block is not None:
        tail = r.segments[last_block + 1:]
        synced = any(isinstance(s, Sync) for s in tail)
        trailing_text = any(isinstance(s, TextRun) and s.text.strip() for s in tail)
        if trailing_text and not synced:
            diags.append(Diagnostic("warning", "UnsyncedTail", "text after the last async block is never synchronized"))
    return diags
