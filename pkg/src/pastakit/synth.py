"""Seeded random annotated responses for property and differential tests.

Generated strings are canonical: tags are spaced only where they meet text,
so no text run is whitespace alone and every word is one whitespace token.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from pastakit.lang import AnnotatedResponse, parse, promise_tag, round10

WORDS = tuple(f"w{i}" for i in range(50)) + ("alpha", "beta", "gamma", "x", "y", "z", "ok", "so")
TOPICS = ("setup", "first step", "the proof", "list item", "example", "code", "summary")


@dataclass(frozen=True)
class SynthConfig:
    max_blocks: int = 4
    max_syncs: int = 3
    max_block_len: int = 40
    max_text_len: int = 4
    # chance that a tokens attribute is the rounded realized length rather than a guess
    honest_estimate: float = 0.5
    words: tuple[str, ...] = WORDS


def _words(rng: random.Random, lo: int, hi: int, cfg: SynthConfig) -> list[str]:
    return [rng.choice(cfg.words) for _ in range(rng.randint(lo, hi))]


def random_program(rng: random.Random, cfg: SynthConfig = SynthConfig()) -> str:
    items: list[tuple] = [("text", _words(rng, 0, cfg.max_text_len, cfg))]
    syncs = rng.randint(0, cfg.max_syncs)
    for _ in range(rng.randint(0, cfg.max_blocks)):
        inner = _words(rng, 1, cfg.max_block_len, cfg)
        if rng.random() < cfg.honest_estimate:
            tokens = round10(len(inner) + 1)
        else:
            tokens = 10 * rng.randint(1, 6)
        items.append(("fork", rng.choice(TOPICS), tokens, inner))
        items.append(("text", _words(rng, 0, cfg.max_text_len, cfg)))
        if syncs and rng.random() < 0.5:
            syncs -= 1
            items.append(("sync",))
            items.append(("text", _words(rng, 0, cfg.max_text_len, cfg)))
    if syncs:
        items.append(("sync",))
        items.append(("text", _words(rng, 0, cfg.max_text_len, cfg)))

    out: list[str] = []
    for i, item in enumerate(items):
        if item[0] == "text":
            if not item[1]:
                continue
            text = " ".join(item[1])
            if i > 0:
                text = " " + text
            if i < len(items) - 1 and any(x[0] != "text" or x[1] for x in items[i + 1:]):
                text += " "
            out.append(text)
        elif item[0] == "fork":
            _, topic, tokens, inner = item
            out.append(f"{promise_tag(topic, tokens)}<async>{' '.join(inner)}</async>")
        else:
            out.append("<sync/>")
    return "".join(out)


def random_response(rng: random.Random, cfg: SynthConfig = SynthConfig()) -> AnnotatedResponse:
    return parse(random_program(rng, cfg))


def random_prompt(rng: random.Random, max_words: int = 6, cfg: SynthConfig = SynthConfig()) -> str:
    return " ".join(_words(rng, 1, max_words, cfg))
