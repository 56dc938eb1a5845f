"""Batch commands over annotated corpora.

Every report embeds the resolved run configuration and the tool version, and
contains no timestamps, so re-running with a report's embedded config (pass
the report itself to ``--config``) reproduces it byte for byte. ``bench`` is the
one exception: its timings are wall-clock measurements.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from pastakit import __version__, plan
from pastakit.backends.scripted import ScriptedBackend
from pastakit.backends.transformer import TinyTransformer, TinyTransformerBackend, TinyTransformerConfig
from pastakit.errors import DegeneratePair, FileUnreadable, PastaError, TooFewCandidates
from pastakit.interpreter import InterpreterConfig, PositionStrategy, bench, naive_run, run
from pastakit.lang import from_inline, parse_any, serialize, strip, validate
from pastakit.preference import (
    Candidate,
    Efficiency,
    HttpJudge,
    JudgeConfig,
    MockJudge,
    bonbon_loss,
    efficiency_metric,
    judge_candidates,
    parse_lambda,
    sample_candidates,
    select_pair,
)
from pastakit.preference.scoring import DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_N, lambda_label
from pastakit.tokenizer import Tokenizer
from pastakit.training import build_baseline_example, build_sft_example, ingest_corpus, iter_lines

log = logging.getLogger("pasta")

DECODE_COLUMNS = (
    "id", "line", "response_tokens", "baseline_tokens", "timesteps", "critical_path",
    "theoretical_speedup", "theoretical_parallelism", "spawns", "max_concurrent_threads", "sync_wait",
)
BENCH_COLUMNS = (
    "id", "line", "baseline_seconds", "test_seconds", "realized_speedup", "theoretical_speedup",
    "baseline_timesteps", "test_timesteps",
)


# --- shared helpers -------------------------------------------------------------

def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _run_config(args: argparse.Namespace) -> dict:
    skip = {"func", "config", "verbose", "commands"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _report(args: argparse.Namespace, body: dict) -> dict:
    return {"tool": "pasta", "version": __version__, "command": args.command, "config": _run_config(args), **body}


def _emit(args: argparse.Namespace, name: str, text: str) -> None:
    """Write ``text`` to ``<out_dir>/<name>``, or stdout when no directory is set."""
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text, encoding="utf-8")
    elif name.endswith(".json"):
        sys.stdout.write(text)


def _csv(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _tokenizer(args: argparse.Namespace) -> Tokenizer:
    return Tokenizer.bytes() if args.tokenizer == "bytes" else Tokenizer()


def _interp_config(args: argparse.Namespace) -> InterpreterConfig:
    return InterpreterConfig(args.max_sequence_length, args.max_threads, args.fork_token_cap)


def _baseline_tokens(rec, r, tok: Tokenizer) -> int:
    return tok.count(rec.baseline) if rec.baseline else tok.count(strip(r))


# --- commands -------------------------------------------------------------------

def cmd_validate(args: argparse.Namespace) -> int:
    tok = _tokenizer(args)
    corpus = ingest_corpus(args.corpus, tok)
    warnings: dict[str, int] = {}
    for _, r in corpus.pairs:
        for d in validate(r):
            warnings[d.code] = warnings.get(d.code, 0) + 1
    body = {
        "records": len(corpus.pairs) + corpus.skipped,
        "valid": len(corpus.pairs),
        "failed": corpus.skipped,
        "error_counts": corpus.counts(),
        "warning_counts": dict(sorted(warnings.items())),
        "failures": [{"line": d.line, "code": d.code, "message": d.message} for d in corpus.diagnostics],
    }
    _emit(args, "validate.json", _dump(_report(args, body)))
    return 1 if corpus.skipped else 0


def cmd_convert(args: argparse.Namespace) -> int:
    tok = _tokenizer(args)
    path = Path(args.corpus)
    if path.suffix != ".jsonl":
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise FileUnreadable(f"cannot read {path}: {exc}") from exc
        out = serialize(from_inline(text, tok))
        _write_or_print(args, out)
        return 0
    lines = []
    failed = 0
    for line, raw in iter_lines(path):
        try:
            obj = json.loads(raw)
            turns = obj["conversations"] if isinstance(obj, dict) else obj
            for turn in turns:
                if str(turn.get("from", "")).lower() in ("chatbot", "gpt", "assistant"):
                    turn["value"] = serialize(parse_any(turn["value"], tok))
        except (PastaError, ValueError, KeyError, TypeError, AttributeError) as exc:
            log.warning("line %d: %s", line, exc)
            failed += 1
            continue
        lines.append(json.dumps(obj, ensure_ascii=False))
    _write_or_print(args, "".join(x + "\n" for x in lines))
    return 1 if failed else 0


def _write_or_print(args: argparse.Namespace, text: str) -> None:
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _make_backend(args: argparse.Namespace, r, tok: Tokenizer):
    script = ScriptedBackend.from_response(r, tok)
    if args.backend == "scripted":
        return script
    vocab = max(TinyTransformerConfig.vocab, tok.vocab_size)
    model = TinyTransformer(TinyTransformerConfig(vocab=vocab, seed=args.seed,
                                                  max_positions=args.max_sequence_length))
    return TinyTransformerBackend(model, script=script, record=False)


def cmd_decode(args: argparse.Namespace) -> int:
    tok = _tokenizer(args)
    corpus = ingest_corpus(args.corpus, tok)
    strategy = PositionStrategy.parse(args.strategy)
    config = _interp_config(args)
    rows, reports, traces = [], [], []
    mismatches = []
    for rec, (_, r) in zip(corpus.records, corpus.pairs):
        prompt = tok.encode_text(rec.prompt)
        backend = _make_backend(args, r, tok)
        oracle = ScriptedBackend.from_response(r, tok).oracle_lengths
        tr = run(prompt, backend, tok, strategy, config, oracle_lengths=oracle)
        if tr.text(tok) != serialize(r):
            raise PastaError(f"line {rec.line}: transcript does not reproduce the response")
        if args.check_naive:
            tn = naive_run(prompt, _make_backend(args, r, tok), tok, strategy, config, oracle_lengths=oracle)
            if tn.token_stream() != tr.token_stream() or tn.logical_tokens != tr.logical_tokens:
                mismatches.append(rec.id)
        rep = plan.report(r, tok, _baseline_tokens(rec, r, tok))
        reports.append(rep)
        rows.append({
            "id": rec.id, "line": rec.line, "response_tokens": len(tr.logical_tokens),
            "baseline_tokens": rep.baseline_tokens, "timesteps": tr.num_timesteps,
            "critical_path": rep.critical_path, "theoretical_speedup": rep.theoretical_speedup,
            "theoretical_parallelism": rep.theoretical_parallelism, "spawns": tr.stats.spawns,
            "max_concurrent_threads": tr.stats.max_concurrent_threads, "sync_wait": sum(tr.stats.sync_waits),
        })
        if args.trace:
            traces.extend(json.dumps({"id": rec.id, **e.to_record()}) for e in tr.events)
    aggregate = plan.aggregate_reports(reports) if reports else {}
    agg_rows = [{"id": label, **{k: aggregate[mean][k] for k in ("theoretical_speedup", "theoretical_parallelism")}}
                for label, mean in (("geomean", "geometric"), ("arithmean", "arithmetic")) if aggregate]
    body = {"records": rows, "aggregate": aggregate, "skipped": corpus.counts()}
    if args.check_naive:
        body["naive_mismatches"] = mismatches
    _emit(args, "decode.json", _dump(_report(args, body)))
    _emit(args, "decode.csv", _csv(DECODE_COLUMNS, rows + agg_rows))
    if args.trace:
        _emit(args, "trace.jsonl", "".join(t + "\n" for t in traces))
    return 2 if mismatches else 0


def cmd_bench(args: argparse.Namespace) -> int:
    tok = _tokenizer(args)
    corpus = ingest_corpus(args.corpus, tok)
    strategy = PositionStrategy.parse(args.strategy)
    config = _interp_config(args)
    rows = []
    for rec, (_, r) in zip(corpus.records, corpus.pairs):
        prompt = tok.encode_text(rec.prompt)
        backend = ScriptedBackend.from_response(r, tok, latency=args.latency)
        baseline = tok.encode_text(rec.baseline if rec.baseline else strip(r))
        res = bench(prompt, backend, tok, baseline, strategy, config, oracle_lengths=backend.oracle_lengths)
        rows.append({"id": rec.id, "line": rec.line, **res.to_record(),
                     "theoretical_speedup": plan.report(r, tok, len(baseline)).theoretical_speedup})
    aggregate = {}
    if rows:
        for mean in plan.Mean:
            aggregate[mean.value] = {k: plan.aggregate([x[k] for x in rows], mean)
                                     for k in ("realized_speedup", "theoretical_speedup")}
    agg_rows = [{"id": label, **aggregate[mean]} for label, mean in (("geomean", "geometric"),
                                                                    ("arithmean", "arithmetic")) if aggregate]
    _emit(args, "bench.json", _dump(_report(args, {"records": rows, "aggregate": aggregate})))
    _emit(args, "bench.csv", _csv(BENCH_COLUMNS, rows + agg_rows))
    return 0


def _make_judge(args: argparse.Namespace):
    if args.judge == "mock":
        if args.mock_reply:
            winner, _, conf = args.mock_reply.partition(":")
            return MockJudge((winner, float(conf)))
        return MockJudge()
    return HttpJudge(JudgeConfig.from_env(max_in_flight=args.max_in_flight))


def cmd_prefs(args: argparse.Namespace) -> int:
    tok = _tokenizer(args)
    corpus = ingest_corpus(args.corpus, tok)
    lambdas = [parse_lambda(x) for x in args.lambdas]
    variant = Efficiency(args.variant)
    judge = _make_judge(args)
    datasets: dict[str, list[dict]] = {lambda_label(lam): [] for lam in lambdas}
    skips: dict[str, dict[str, int]] = {lambda_label(lam): {} for lam in lambdas}
    judge_failures = []
    for index, (rec, (prompt, r)) in enumerate(zip(corpus.records, corpus.pairs)):
        if rec.candidates:
            responses = [parse_any(c, tok) for c in rec.candidates]
        else:
            responses = sample_candidates(r, args.n, seed=args.seed + index, temperature=args.temperature)
        texts = [serialize(x) for x in responses]
        references = {"original": strip(r)}
        if rec.baseline:
            references["baseline"] = rec.baseline
        qualities = judge_candidates(judge, index, prompt, texts, references, args.max_in_flight)
        base_tokens = _baseline_tokens(rec, r, tok)
        candidates = []
        for text, resp, q in zip(texts, responses, qualities):
            for err in q.errors:
                judge_failures.append({"id": rec.id, "line": rec.line, "error": str(err)})
            rep = plan.report(resp, tok, base_tokens)
            candidates.append(Candidate(text, rep.theoretical_speedup, efficiency_metric(rep, variant), q.ratio))
        for lam in lambdas:
            label = lambda_label(lam)
            try:
                pref = select_pair(prompt, candidates, lam)
            except (DegeneratePair, TooFewCandidates) as exc:
                name = type(exc).__name__
                skips[label][name] = skips[label].get(name, 0) + 1
                continue
            datasets[label].append({"id": rec.id, **pref.to_record()})
    files = {}
    for label, recs in datasets.items():
        name = f"prefs_lambda-{label}.jsonl"
        files[label] = name
        _emit(args, name, "".join(json.dumps(x, sort_keys=True, ensure_ascii=False) + "\n" for x in recs))
    body = {
        "variant": variant.value,
        "lambdas": list(datasets),
        "pairs": {k: len(v) for k, v in datasets.items()},
        "skipped": skips,
        "files": files,
        "judge_failures": judge_failures,
        "corpus_skipped": corpus.counts(),
    }
    _emit(args, "prefs.json", _dump(_report(args, body)))
    return 0


def cmd_loss_eval(args: argparse.Namespace) -> int:
    keys = ("logp_best", "logp_worst", "logp_best_init", "logp_worst_init")
    losses = []
    for line, raw in iter_lines(args.corpus):
        obj = json.loads(raw)
        losses.append({"line": line, "loss": bonbon_loss(*(float(obj[k]) for k in keys),
                                                         alpha=args.alpha, beta=args.beta)})
    mean = float(np.mean([x["loss"] for x in losses])) if losses else None
    _emit(args, "loss.json", _dump(_report(args, {"losses": losses, "mean_loss": mean})))
    return 0


def cmd_sft(args: argparse.Namespace) -> int:
    tok = _tokenizer(args)
    corpus = ingest_corpus(args.corpus, tok)
    strategy = PositionStrategy.parse(args.strategy)
    out = []
    for rec, (prompt, r) in zip(corpus.records, corpus.pairs):
        ids = tok.encode_text(prompt)
        ex = build_baseline_example(ids, r, tok) if args.baseline else build_sft_example(ids, r, tok, strategy)
        out.append(json.dumps({"id": rec.id, **ex.to_record()}))
    _emit(args, "sft.jsonl", "".join(x + "\n" for x in out))
    _emit(args, "sft.json", _dump(_report(args, {"examples": len(out), "skipped": corpus.counts()})))
    return 0


# --- parser ---------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, corpus_help: str = "line-delimited JSON corpus") -> None:
    p.add_argument("corpus", nargs="?", help=corpus_help)
    p.add_argument("--config", help="JSON config file; a previous report's embedded config also works")
    p.add_argument("--out-dir", help="directory for report files (default: JSON report on stdout)")
    p.add_argument("--tokenizer", choices=("whitespace", "bytes"), default="whitespace")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="count", default=0)


def _interp_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", default="pred10x",
                   help="fixed[:k], pred1x, pred10x, oracle1x, oracle10x or oracle-exact")
    p.add_argument("--max-sequence-length", type=int, default=InterpreterConfig.max_sequence_length)
    p.add_argument("--max-threads", type=int, default=InterpreterConfig.max_threads)
    p.add_argument("--fork-token-cap", type=int, default=InterpreterConfig.fork_token_cap)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pasta", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pasta {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("validate", help="parse every record and count failures")
    commands["validate"] = p
    _common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("convert", help="convert inline annotations to canonical form")
    commands["convert"] = p
    _common(p, "inline text file, or a .jsonl corpus whose responses are converted")
    p.add_argument("-o", "--output", help="output path (default stdout)")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("decode", help="run the interpreter on every record and report speedups")
    commands["decode"] = p
    _common(p)
    _interp_flags(p)
    p.add_argument("--backend", choices=("scripted", "transformer"), default="scripted")
    p.add_argument("--check-naive", action="store_true", help="also run the naive interpreter and compare")
    p.add_argument("--trace", action="store_true", help="write decode events to trace.jsonl")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="wall-clock speedup with a latency-modelled scripted backend")
    commands["bench"] = p
    _common(p)
    _interp_flags(p)
    p.add_argument("--latency", type=float, default=0.002, help="seconds per batched step")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("prefs", help="score candidates and emit best/worst preference pairs")
    commands["prefs"] = p
    _common(p)
    p.add_argument("--lambda", dest="lambdas", nargs="+", default=["1"],
                   help="quality weights; 'inf' ranks by quality alone")
    p.add_argument("--variant", choices=[v.value for v in Efficiency], default=Efficiency.SPEEDUP.value)
    p.add_argument("--n", type=int, default=DEFAULT_N, help="candidates sampled per prompt")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--judge", choices=("mock", "http"), default="mock")
    p.add_argument("--mock-reply", help="fixed mock verdict such as A:0.7")
    p.add_argument("--max-in-flight", type=int, default=4)
    p.set_defaults(func=cmd_prefs)

    p = sub.add_parser("loss-eval", help="evaluate the BoNBoN loss on log-probability records")
    commands["loss-eval"] = p
    _common(p, "JSONL with logp_best, logp_worst, logp_best_init, logp_worst_init")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.set_defaults(func=cmd_loss_eval)

    p = sub.add_parser("sft", help="emit SFT training examples")
    commands["sft"] = p
    _common(p)
    p.add_argument("--strategy", default="pred10x")
    p.add_argument("--baseline", action="store_true", help="emit stripped, plain causal examples")
    p.set_defaults(func=cmd_sft)
    parser.set_defaults(commands=commands)
    return parser


def _load_config(path: str) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise FileUnreadable(f"cannot read config {path}: {exc}") from exc
    if isinstance(data, dict) and isinstance(data.get("config"), dict) and data.get("tool") == "pasta":
        data = data["config"]
    if not isinstance(data, dict):
        raise FileUnreadable(f"config {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        # config values become defaults, so explicit flags still win
        sub = args.commands[args.command]
        cfg = _load_config(args.config)
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known - {"command"})
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**{k: v for k, v in cfg.items() if k != "command"})
        args = parser.parse_args(argv)
    if args.corpus is None:
        parser.error("a corpus path is required (argument or config)")
    return args


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PastaError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
