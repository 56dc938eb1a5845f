"""Wall-clock comparison of asynchronous decoding against a sequential baseline."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Sequence

from pastakit.backends.base import DecoderBackend
from pastakit.backends.scripted import ScriptedBackend
from pastakit.interpreter.core import InterpreterConfig, Transcript, run
from pastakit.interpreter.positions import PositionStrategy
from pastakit.tokenizer import Tokenizer


@dataclass(frozen=True)
class BenchResult:
    baseline_seconds: float
    test_seconds: float
    baseline_timesteps: int
    test_timesteps: int

    @property
    def realized_speedup(self) -> float:
        return self.baseline_seconds / self.test_seconds

    def to_record(self) -> dict:
        return {**asdict(self), "realized_speedup": self.realized_speedup}


def _timed(prompt, backend, tok, strategy, config, oracle_lengths) -> tuple[float, Transcript]:
    # decode twice and keep the second timing, so one-off warmup costs drop out
    run(prompt, backend, tok, strategy, config, oracle_lengths=oracle_lengths)
    start = time.perf_counter()
    tr = run(prompt, backend, tok, strategy, config, oracle_lengths=oracle_lengths)
    return time.perf_counter() - start, tr


def bench(
    prompt_tokens: Sequence[int],
    backend: DecoderBackend,
    tok: Tokenizer,
    baseline_tokens: Sequence[int],
    strategy: PositionStrategy = PositionStrategy(),
    config: InterpreterConfig = InterpreterConfig(),
    *,
    baseline_backend: DecoderBackend | None = None,
    oracle_lengths: Sequence[int] | None = None,
) -> BenchResult:
    """Time ``backend`` under the interpreter against a sequential decode of ``baseline_tokens``.

    For a scripted backend the baseline replayer is built automatically with
    the same per-step latency; other backends need ``baseline_backend``.
    """
    if baseline_backend is None:
        if not isinstance(backend, ScriptedBackend):
            raise ValueError("baseline_backend is required for non-scripted backends")
        baseline_backend = ScriptedBackend.sequential(baseline_tokens, backend.latency)
    base_s, base_tr = _timed(prompt_tokens, baseline_backend, tok, strategy, config, None)
    test_s, test_tr = _timed(prompt_tokens, backend, tok, strategy, config, oracle_lengths)
    return BenchResult(base_s, test_s, base_tr.num_timesteps, test_tr.num_timesteps)
