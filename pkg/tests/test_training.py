import json
import random

import numpy as np
import pytest

from oracles import SINGLE, TWO
from pastakit import synth, training
from pastakit.backends import ScriptedBackend
from pastakit.errors import FileUnreadable, InvalidAnnotation
from pastakit.interpreter import PositionStrategy, run
from pastakit.lang import parse
from pastakit.tokenizer import EOS, Kind


def example(text, tok, prompt="Q"):
    return training.build_sft_example(tok.encode_text(prompt), parse(text), tok)


def words(ex, tok, idx):
    return [tok.detokenize([ex.input_ids[j]]).strip() for j in idx]


def test_fast_mask_matches_rule_walker(tok):
    for seed in range(100):
        rng = random.Random(seed)
        r = synth.random_response(rng)
        infos = tok.encode_response(r)
        fast = training.dense(training.structural_mask(infos))
        n = len(infos)
        slow = np.array([[training.may_attend(infos, i, j) for j in range(n)] for i in range(n)], bool).reshape(n, n)
        assert np.array_equal(fast, slow), seed


def test_single_fork_rows(tok):
    ex = example(SINGLE, tok)
    mask = ex.attention_mask()
    labels = words(ex, tok, range(len(ex)))
    at = {w: i for i, w in enumerate(labels)}
    f_row = [labels[j] for j in np.flatnonzero(mask[at["F"]])]
    assert "C" not in f_row and "D" not in f_row and "E" not in f_row and "</async>" not in f_row
    assert f_row[-1] == "F" and "B" in f_row
    g_row = [labels[j] for j in np.flatnonzero(mask[at["G"]])]
    assert g_row == labels[: at["G"] + 1]
    d_row = [labels[j] for j in np.flatnonzero(mask[at["D"]])]
    assert d_row[-3:] == ["<async>", "C", "D"] and "F" not in d_row


def test_promise_target_skips_block(tok):
    ex = example(SINGLE, tok)
    kinds = [tok.kind(t) for t in ex.input_ids]
    p = kinds.index(Kind.PROMISE)
    assert tok.detokenize([ex.targets[p]]).strip() == "F"
    close = kinds.index(Kind.ASYNC_CLOSE)
    assert ex.targets[close] == training.IGNORE
    assert ex.targets[-1] == EOS
    # the last prompt token predicts the first response token
    assert ex.targets[0] == ex.input_ids[1] and ex.prompt_len == 1


def test_promise_skip_is_total(tok):
    for seed in range(100):
        r = synth.random_response(random.Random(seed))
        ex = training.build_sft_example([], r, tok)
        kinds = [tok.kind(t) for t in ex.input_ids]
        for i, k in enumerate(kinds):
            if k is Kind.PROMISE:
                assert tok.kind(ex.targets[i]) is not Kind.ASYNC_OPEN or ex.targets[i] == EOS


def test_baseline_example(tok):
    ex = training.build_baseline_example(tok.encode_text("Q"), parse(SINGLE), tok)
    assert len(ex) == 8
    assert ex.position_ids == list(range(8))
    assert np.array_equal(ex.attention_mask(), np.tril(np.ones((8, 8), bool)))
    plain = training.build_sft_example(tok.encode_text("Q"), parse("A B C"), tok)
    base = training.build_baseline_example(tok.encode_text("Q"), parse("A B C"), tok)
    assert plain.to_record() == base.to_record()


def test_positions_match_interpreter(tok):
    strategies = ["pred10x", "fixed:40", "oracle-exact", "pred1x"]
    for seed in range(100):
        rng = random.Random(seed)
        r = synth.random_response(rng)
        prompt = tok.encode_text(synth.random_prompt(rng))
        strategy = PositionStrategy.parse(strategies[seed % 4])
        b = ScriptedBackend.from_response(r, tok)
        tr = run(prompt, b, tok, strategy, oracle_lengths=b.oracle_lengths)
        ex = training.build_sft_example(prompt, r, tok, strategy)
        n = len(prompt)
        assert ex.input_ids[n:] == list(tr.logical_tokens), seed
        assert ex.position_ids[n:] == list(tr.logical_positions), seed


def test_two_fork_mask_hides_sibling(tok):
    ex = example(TWO, tok)
    labels = words(ex, tok, range(len(ex)))
    mask = ex.attention_mask()
    b0 = labels.index("b0")
    assert not any(labels[j].startswith("a") for j in np.flatnonzero(mask[b0]))
    t = labels.index("T")
    assert mask[t, : t + 1].all()


def test_invalid_annotation_rejected(tok):
    long_topic = " ".join(["w"] * 9)
    with pytest.raises(InvalidAnnotation):
        example(f'<promise topic="{long_topic}" tokens="10"/><async>a</async><sync/>', tok)


def test_example_record_is_json(tok):
    rec = example(SINGLE, tok).to_record()
    assert json.loads(json.dumps(rec)) == rec
    assert rec["mask"][0] == [[0, 1]]


def test_ingest_inline_sample(data_dir, tok):
    corpus = training.ingest_corpus(data_dir / "inline_sample.jsonl", tok)
    assert corpus.skipped == 0 and len(corpus.pairs) == 1
    assert len(corpus.pairs[0][1].blocks) == 3


def test_ingest_fixtures(data_dir, tok):
    corpus = training.ingest_corpus(data_dir / "fixtures.jsonl", tok)
    assert [r.id for r in corpus.records] == ["single-fork", "two-fork", "plain"]
    assert corpus.records[0].baseline == "A B C D E F G"


def test_ingest_skips_bad_records(tmp_path, tok):
    path = tmp_path / "c.jsonl"
    good = {"conversations": [{"from": "human", "value": "q"}, {"from": "gpt", "value": "fine"}]}
    bad = {"conversations": [{"from": "human", "value": "q"},
                             {"from": "gpt", "value": '<promise topic="x" tokens="10"/><async>open'}]}
    path.write_text("\n".join([json.dumps(good), json.dumps(bad), "{not json", json.dumps([good["conversations"][0]])])
                    + "\n", encoding="utf-8")
    corpus = training.ingest_corpus(path, tok)
    assert len(corpus.pairs) == 1
    assert corpus.counts() == {"MalformedRecord": 2, "UnbalancedAsync": 1}
    assert [d.line for d in corpus.diagnostics] == [2, 3, 4]


def test_ingest_empty_and_missing(tmp_path, tok):
    empty = tmp_path / "e.jsonl"
    empty.write_text("", encoding="utf-8")
    corpus = training.ingest_corpus(empty, tok)
    assert corpus.pairs == [] and corpus.skipped == 0
    with pytest.raises(FileUnreadable):
        training.ingest_corpus(tmp_path / "nope.jsonl", tok)
