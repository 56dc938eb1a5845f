"""Candidate scoring, best/worst selection and the BoNBoN objective."""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, replace
from typing import Sequence, Union

from pastakit.errors import DegeneratePair, NonPositiveBeta, TooFewCandidates
from pastakit.lang import AnnotatedResponse, AsyncBlock, Promise, Segment, Sync, TextRun
from pastakit.plan import SpeedupReport

EPSILON = 1e-6
DEFAULT_N = 10
DEFAULT_ALPHA = 0.005
DEFAULT_BETA = 1.0


class Side(enum.Enum):
    A = "A"
    B = "B"


@dataclass(frozen=True)
class Judgment:
    """One pairwise verdict; ``subject`` is the side the scored candidate sat on."""

    winner: Side
    confidence: float
    subject: Side = Side.A

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def won(self) -> bool:
        return self.winner is self.subject

    def relabeled(self) -> Judgment:
        """The same verdict with the candidate's side swapped, turning wins into losses."""
        other = Side.B if self.subject is Side.A else Side.A
        return Judgment(self.winner, self.confidence, other)


def quality_ratio(judgments: Sequence[Judgment], eps: float = EPSILON) -> float:
    """Confidence-weighted wins over confidence-weighted losses."""
    if not judgments:
        raise ValueError("quality_ratio needs at least one judgment")
    wins = math.fsum(j.confidence for j in judgments if j.won)
    losses = math.fsum(j.confidence for j in judgments if not j.won)
    return (wins + eps) / (losses + eps)


class Efficiency(enum.Enum):
    SPEEDUP = "speedup"
    HARMONIC = "harmonic"
    ARITHMETIC = "arithmetic"
    PARALLELISM = "parallelism"


def efficiency_metric(report: SpeedupReport, variant: Efficiency | str = Efficiency.SPEEDUP) -> float:
    s, p = report.theoretical_speedup, report.theoretical_parallelism
    variant = Efficiency(variant)
    if variant is Efficiency.SPEEDUP:
        return s
    if variant is Efficiency.PARALLELISM:
        return p
    if variant is Efficiency.ARITHMETIC:
        return (s + p) / 2
    return 2 * s * p / (s + p)


class _QualityOnly:
    """Weight that ranks by quality alone, as if lambda were infinite."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "QUALITY_ONLY"


QUALITY_ONLY = _QualityOnly()
Lambda = Union[float, _QualityOnly]


def parse_lambda(text: str | float) -> Lambda:
    if isinstance(text, str) and text.strip().lower() in ("inf", "quality", "quality-only"):
        return QUALITY_ONLY
    value = float(text)
    return QUALITY_ONLY if math.isinf(value) else value


def lambda_label(lam: Lambda) -> str:
    return "inf" if lam is QUALITY_ONLY else repr(float(lam))


def score(efficiency: float, quality: float, lam: Lambda) -> float:
    if lam is QUALITY_ONLY:
        return quality
    return efficiency + lam * quality


@dataclass(frozen=True)
class Candidate:
    response: str
    theoretical_speedup: float
    efficiency: float
    quality_ratio: float | None
    score: float | None = None


@dataclass(frozen=True)
class PreferenceRecord:
    prompt: str
    candidates: tuple[Candidate, ...]
    lam: Lambda
    best_index: int
    worst_index: int

    @property
    def best(self) -> Candidate:
        return self.candidates[self.best_index]

    @property
    def worst(self) -> Candidate:
        return self.candidates[self.worst_index]

    def to_record(self) -> dict:
        return {
            "prompt": self.prompt,
            "best": self.best.response,
            "worst": self.worst.response,
            "best_score": self.best.score,
            "worst_score": self.worst.score,
            "lambda": lambda_label(self.lam),
        }


def select_pair(prompt: str, candidates: Sequence[Candidate], lam: Lambda) -> PreferenceRecord:
    """Score candidates and pick argmax/argmin, breaking ties toward the lowest index.

    Candidates whose quality is missing are left out before selection.
    """
    kept = [c for c in candidates if c.quality_ratio is not None]
    if len(kept) < 2:
        raise TooFewCandidates(f"need at least 2 scored candidates, have {len(kept)}")
    scored = tuple(Candidate(c.response, c.theoretical_speedup, c.efficiency, c.quality_ratio,
                             score(c.efficiency, c.quality_ratio, lam)) for c in kept)
    best = worst = 0
    for i, c in enumerate(scored):
        if c.score > scored[best].score:
            best = i
        if c.score < scored[worst].score:
            worst = i
    if best == worst:
        raise DegeneratePair(f"all {len(scored)} candidates tie at score {scored[0].score}")
    return PreferenceRecord(prompt, scored, lam, best, worst)


def bonbon_loss(logp_best: float, logp_worst: float, logp_best_init: float, logp_worst_init: float,
                alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> float:
    """Best-of-N imitation term plus the squared IPO-style margin term."""
    if not beta > 0:
        raise NonPositiveBeta(f"beta must be positive, got {beta}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    margin = (logp_best - logp_worst) - (logp_best_init - logp_worst_init) - 1.0 / beta
    return -alpha * logp_best + (1.0 - alpha) * margin * margin


# --- candidate sampling -----------------------------------------------------------

def sample_variant(r: AnnotatedResponse, rng: random.Random, temperature: float = 1.0) -> AnnotatedResponse:
    """Randomly drop annotations from ``r``; higher temperature drops more.

    Stands in for sampling from a fine-tuned model: each block is independently
    folded back into the main text with probability ``temperature / 2``
    (capped at 1), and syncs left with nothing to wait for are removed.
    """
    drop = min(1.0, max(0.0, temperature / 2))
    dropped = {p.block_id for p in r.promises if rng.random() < drop}
    kept = [p.block_id for p in r.promises if p.block_id not in dropped]
    renumber = {old: new for new, old in enumerate(kept, start=1)}
    segments: list[Segment] = []
    unsynced = False
    for seg in r.segments:
        if isinstance(seg, Promise) and seg.block_id in dropped:
            continue
        if isinstance(seg, Promise):
            seg = replace(seg, block_id=renumber[seg.block_id])
        elif isinstance(seg, AsyncBlock) and seg.block_id in dropped:
            seg = TextRun(seg.text)
        elif isinstance(seg, AsyncBlock):
            seg = replace(seg, block_id=renumber[seg.block_id])
            unsynced = True
        if isinstance(seg, Sync):
            if not unsynced:
                continue
            unsynced = False
        if isinstance(seg, TextRun) and not seg.text:
            continue
        if isinstance(seg, TextRun) and segments and isinstance(segments[-1], TextRun):
            left, right = segments[-1].text.rstrip(), seg.text.lstrip()
            segments[-1] = TextRun(f"{left} {right}" if left else f" {right}")
            continue
        segments.append(seg)
    return AnnotatedResponse(tuple(segments))


def sample_candidates(r: AnnotatedResponse, n: int = DEFAULT_N, seed: int = 0,
                      temperature: float = 1.0) -> list[AnnotatedResponse]:
    rng = random.Random(seed)
    return [sample_variant(r, rng, temperature) for _ in range(n)]
