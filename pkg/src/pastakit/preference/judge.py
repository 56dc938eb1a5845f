"""Pairwise judge clients and the fan-out that turns verdicts into quality ratios.

The HTTP protocol is deliberately small: POST ``{"prompt", "response_a",
"response_b"}`` to the endpoint and expect ``{"winner": "A"|"B",
"confidence": <0..1>}`` back. The endpoint and key come from
``PASTA_JUDGE_URL`` and ``PASTA_JUDGE_KEY``.
"""

from __future__ import annotations

import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import httpx
import tenacity

from pastakit.errors import JudgeError, JudgeTimeout, MalformedReply, QuotaExceeded
from pastakit.preference.scoring import Judgment, Side, quality_ratio

URL_ENV = "PASTA_JUDGE_URL"
KEY_ENV = "PASTA_JUDGE_KEY"


@dataclass(frozen=True)
class JudgeConfig:
    url: str | None = None
    api_key: str | None = field(default=None, repr=False)
    timeout: float = 30.0
    max_attempts: int = 4
    backoff_initial: float = 0.5
    backoff_max: float = 8.0
    max_in_flight: int = 4

    @classmethod
    def from_env(cls, **overrides) -> JudgeConfig:
        env = {"url": os.environ.get(URL_ENV), "api_key": os.environ.get(KEY_ENV)}
        env.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**env)


class Judge(Protocol):
    def compare(self, prompt: str, response_a: str, response_b: str, pair: object = None) -> Judgment: ...


def parse_reply(data: object, pair: object = None) -> Judgment:
    if not isinstance(data, dict):
        raise MalformedReply("judge reply is not an object", pair)
    winner = data.get("winner")
    confidence = data.get("confidence")
    if not isinstance(winner, str) or winner.strip().upper() not in ("A", "B"):
        raise MalformedReply(f"judge reply has no usable winner: {winner!r}", pair)
    if isinstance(confidence, bool) or not isinstance(confidence, (int, float)):
        raise MalformedReply(f"judge reply has no numeric confidence: {confidence!r}", pair)
    if not 0.0 <= confidence <= 1.0:
        raise MalformedReply(f"confidence {confidence} outside [0, 1]", pair)
    return Judgment(Side(winner.strip().upper()), float(confidence))


class _Transient(Exception):
    def __init__(self, reason: str, status: int | None = None):
        super().__init__(reason)
        self.reason = reason
        self.status = status


class HttpJudge:
    """Judge behind an HTTP endpoint, retried with exponential backoff.

    Timeouts, transport errors, 429 and 5xx replies are retried; after the
    last attempt they surface as :class:`JudgeTimeout`,
    :class:`QuotaExceeded` or :class:`JudgeError`.
    """

    def __init__(self, config: JudgeConfig, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        if not config.url:
            raise JudgeError(f"no judge endpoint configured (set {URL_ENV})")
        self.config = config
        headers = {"Authorization": f"Bearer {config.api_key}"} if config.api_key else {}
        self._client = httpx.Client(transport=transport, timeout=config.timeout, headers=headers)
        self._sleep = sleep

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> HttpJudge:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _once(self, payload: dict, pair: object) -> Judgment:
        try:
            resp = self._client.post(self.config.url, json=payload)
        except httpx.TimeoutException as exc:
            raise _Transient(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise _Transient(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Transient(f"HTTP {resp.status_code}", resp.status_code)
        if resp.status_code >= 400:
            raise JudgeError(f"judge rejected the request with HTTP {resp.status_code}", pair)
        try:
            data = resp.json()
        except ValueError as exc:
            raise MalformedReply("judge reply is not JSON", pair) from exc
        return parse_reply(data, pair)

    def compare(self, prompt: str, response_a: str, response_b: str, pair: object = None) -> Judgment:
        payload = {"prompt": prompt, "response_a": response_a, "response_b": response_b}
        retrying = tenacity.Retrying(
            stop=tenacity.stop_after_attempt(self.config.max_attempts),
            wait=tenacity.wait_exponential(multiplier=self.config.backoff_initial, max=self.config.backoff_max),
            retry=tenacity.retry_if_exception_type(_Transient),
            sleep=self._sleep,
            reraise=True,
        )
        try:
            return retrying(self._once, payload, pair)
        except _Transient as exc:
            attempts = self.config.max_attempts
            if exc.status == 429:
                raise QuotaExceeded(f"judge quota exhausted after {attempts} attempts", pair) from exc
            if exc.reason.startswith("timeout"):
                raise JudgeTimeout(f"judge timed out {attempts} times", pair) from exc
            raise JudgeError(f"judge failed after {attempts} attempts: {exc.reason}", pair) from exc


_TAG = re.compile(r"<[^<>]*>")


class MockJudge:
    """Offline judge: a fixed verdict, or a deterministic length heuristic.

    The heuristic prefers the response with more words once tags are removed,
    with confidence growing with the length difference; ties go to A at 0.5.
    """

    def __init__(self, reply: tuple[str, float] | None = None):
        if reply is not None:
            parse_reply({"winner": reply[0], "confidence": reply[1]})
        self.reply = reply
        self.calls: list[tuple[str, str, str]] = []
        self._lock = threading.Lock()

    def compare(self, prompt: str, response_a: str, response_b: str, pair: object = None) -> Judgment:
        with self._lock:
            self.calls.append((prompt, response_a, response_b))
        if self.reply is not None:
            return parse_reply({"winner": self.reply[0], "confidence": self.reply[1]}, pair)
        la = len(_TAG.sub(" ", response_a).split())
        lb = len(_TAG.sub(" ", response_b).split())
        if la == lb:
            return Judgment(Side.A, 0.5)
        conf = 0.5 + 0.5 * abs(la - lb) / (la + lb)
        return Judgment(Side.A if la > lb else Side.B, round(conf, 6))


# --- fan-out ----------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class ComparisonKey:
    prompt: int
    candidate: int
    reference: str
    order: str  # "AB": candidate shown first, "BA": reference shown first


@dataclass
class CandidateQuality:
    judgments: list[Judgment]
    errors: list[JudgeError]

    @property
    def ratio(self) -> float | None:
        """Quality ratio, or ``None`` when any comparison failed."""
        if self.errors or not self.judgments:
            return None
        return quality_ratio(self.judgments)


def judge_candidates(judge: Judge, prompt_index: int, prompt: str, candidates: Sequence[str],
                     references: Mapping[str, str], max_in_flight: int = 4) -> list[CandidateQuality]:
    """Compare every candidate with every reference in both presentation orders."""
    tasks: list[tuple[ComparisonKey, str, str]] = []
    for c, text in enumerate(candidates):
        for name, ref in sorted(references.items()):
            tasks.append((ComparisonKey(prompt_index, c, name, "AB"), text, ref))
            tasks.append((ComparisonKey(prompt_index, c, name, "BA"), ref, text))

    def call(task):
        key, a, b = task
        try:
            return key, judge.compare(prompt, a, b, pair=key)
        except JudgeError as exc:
            return key, exc

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        results = dict(pool.map(call, tasks))

    out = [CandidateQuality([], []) for _ in candidates]
    for key in sorted(results):
        res = results[key]
        slot = out[key.candidate]
        if isinstance(res, JudgeError):
            slot.errors.append(res)
        else:
            subject = Side.A if key.order == "AB" else Side.B
            slot.judgments.append(Judgment(res.winner, res.confidence, subject))
    return out
