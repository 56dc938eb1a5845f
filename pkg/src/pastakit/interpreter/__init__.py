from pastakit.interpreter.core import (
    DecodeEvent,
    InterpreterConfig,
    RunStats,
    Status,
    ThreadState,
    Transcript,
    run,
    visible_slots,
)
from pastakit.interpreter.bench import BenchResult, bench
from pastakit.interpreter.naive import naive_run
from pastakit.interpreter.pool import KvPool, Slot
from pastakit.interpreter.positions import Kind, PositionStrategy, assign_position, block_estimate

__all__ = [
    "BenchResult", "DecodeEvent", "InterpreterConfig", "Kind", "KvPool", "PositionStrategy", "RunStats", "Slot",
    "Status", "ThreadState", "Transcript", "assign_position", "bench", "block_estimate", "naive_run", "run",
    "visible_slots",
]
