import random
import threading
import time

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import SINGLE, TWO, bonbon_exact
from pastakit import synth
from pastakit.errors import (
    DegeneratePair,
    JudgeError,
    JudgeTimeout,
    MalformedReply,
    NonPositiveBeta,
    QuotaExceeded,
    TooFewCandidates,
)
from pastakit.lang import parse, serialize, strip
from pastakit.plan import SpeedupReport
from pastakit.preference import (
    QUALITY_ONLY,
    Candidate,
    ComparisonKey,
    Efficiency,
    HttpJudge,
    JudgeConfig,
    Judgment,
    MockJudge,
    Side,
    bonbon_loss,
    efficiency_metric,
    judge_candidates,
    lambda_label,
    parse_lambda,
    quality_ratio,
    sample_candidates,
    score,
    select_pair,
)

A, B = Side.A, Side.B


def wins_losses(wins, losses):
    return [Judgment(A, c) for c in wins] + [Judgment(B, c) for c in losses]


def test_quality_examples():
    assert quality_ratio(wins_losses([0.9, 0.5], [0.3])) == pytest.approx((1.4 + 1e-6) / (0.3 + 1e-6), abs=0)
    assert quality_ratio(wins_losses([0.9, 0.5], [0.3])) == pytest.approx(4.6667, abs=1e-4)
    assert quality_ratio(wins_losses([1.0] * 4, [])) == pytest.approx(4e6, rel=1e-6)
    assert quality_ratio(wins_losses([0.5], [0.5])) == 1.0
    with pytest.raises(ValueError):
        quality_ratio([])


def test_subject_side_decides_win():
    j = Judgment(B, 0.8, subject=B)
    assert j.won and not j.relabeled().won
    with pytest.raises(ValueError):
        Judgment(A, 1.3)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.floats(0, 1)), min_size=1, max_size=8))
def test_swapping_roles_inverts_ratio(pairs):
    js = [Judgment(A if w else B, c) for w, c in pairs]
    q = quality_ratio(js)
    assert q > 0
    assert quality_ratio([j.relabeled() for j in js]) == pytest.approx(1 / q, rel=1e-9)


def report(speedup, parallelism):
    return SpeedupReport(baseline_tokens=10, critical_path=10,
                         theoretical_speedup=speedup, theoretical_parallelism=parallelism)


def test_efficiency_variants():
    assert efficiency_metric(report(1.5, 1.5), Efficiency.HARMONIC) == 1.5
    assert efficiency_metric(report(1.0, 3.0), "harmonic") == 1.5
    assert efficiency_metric(report(1.0, 3.0), "arithmetic") == 2.0
    assert efficiency_metric(report(1.0, 3.0), "speedup") == 1.0
    assert efficiency_metric(report(1.0, 3.0), "parallelism") == 3.0


def test_score_examples():
    assert score(1.5, 0.8, 2.0) == pytest.approx(3.1)
    assert score(1.5, 0.8, QUALITY_ONLY) == 0.8
    assert score(1.5, 0.8, 0.0) == 1.5
    assert parse_lambda("inf") is QUALITY_ONLY and parse_lambda(float("inf")) is QUALITY_ONLY
    assert parse_lambda("2") == 2.0
    assert lambda_label(QUALITY_ONLY) == "inf" and lambda_label(4) == "4.0"


@settings(max_examples=300, deadline=None)
@given(*[st.fractions(-100, 100)] * 4)
def test_score_is_linear(e, q, l1, l2):
    assert score(e, q, l1 + l2) - score(e, q, l1) == l2 * q


def cand(eff, q):
    return Candidate(f"r{eff}-{q}", eff, eff, q)


def test_select_pair_examples():
    rec = select_pair("p", [cand(1.0, 0), cand(3.0, 0), cand(2.0, 0)], 0.0)
    assert (rec.best_index, rec.worst_index) == (1, 0)
    rec = select_pair("p", [cand(1.0, 0), cand(3.0, 0), cand(3.0, 0), cand(1.0, 0)], 0.0)
    assert (rec.best_index, rec.worst_index) == (1, 0)
    with pytest.raises(DegeneratePair):
        select_pair("p", [cand(1.0, 1.0)] * 3, 1.0)
    with pytest.raises(TooFewCandidates):
        select_pair("p", [cand(1.0, 1.0)], 1.0)


def test_missing_quality_excluded():
    cands = [Candidate("x", 9.0, 9.0, None), cand(1.0, 1.0), cand(2.0, 1.0)]
    rec = select_pair("p", cands, 1.0)
    assert [c.response for c in rec.candidates] == ["r1.0-1.0", "r2.0-1.0"]
    with pytest.raises(TooFewCandidates):
        select_pair("p", cands[:2], 1.0)


def test_select_pair_permutation_invariant():
    rng = random.Random(3)
    for _ in range(200):
        cands = [cand(rng.choice([1.0, 1.5, 2.0]), rng.choice([0.5, 1.0, 4.0])) for _ in range(6)]
        if len({score(c.efficiency, c.quality_ratio, 1.0) for c in cands}) < 2:
            continue
        rec = select_pair("p", cands, 1.0)
        shuffled = cands[:]
        rng.shuffle(shuffled)
        other = select_pair("p", shuffled, 1.0)
        assert other.best.score == rec.best.score and other.worst.score == rec.worst.score


def test_lambda_monotone():
    rng = random.Random(0)
    lambdas = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 100.0, QUALITY_ONLY]
    for _ in range(500):
        cands = [cand(rng.uniform(0.5, 3.0), rng.uniform(0.0, 5.0)) for _ in range(rng.randint(2, 10))]
        qualities = [select_pair("p", cands, lam).best.quality_ratio for lam in lambdas]
        assert qualities == sorted(qualities)


def test_bonbon_fixture():
    assert bonbon_loss(-2.0, -5.0, -2.0, -5.0, 0.005, 1.0) == 1.005
    assert bonbon_loss(-1.0, -3.0, -1.0, -2.0, 0.3, 1.0) == pytest.approx(0.3)
    assert bonbon_loss(-1.5, -0.2, -9.0, -0.1, 1.0, 0.5) == 1.5
    with pytest.raises(NonPositiveBeta):
        bonbon_loss(-1, -1, -1, -1, 0.005, 0.0)
    with pytest.raises(ValueError):
        bonbon_loss(-1, -1, -1, -1, 1.5, 1.0)


def test_bonbon_matches_exact_evaluator():
    rng = random.Random(7)
    for _ in range(1000):
        args = [-rng.uniform(0, 20) for _ in range(4)]
        alpha, beta = rng.random(), rng.uniform(0.05, 5)
        got = bonbon_loss(*args, alpha, beta)
        want = bonbon_exact(*args, alpha, beta)
        assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def test_candidates_are_deterministic_and_valid():
    r = parse(TWO)
    a = sample_candidates(r, n=10, seed=4)
    assert a == sample_candidates(r, n=10, seed=4)
    assert len(a) == 10
    for c in a:
        assert parse(serialize(c)) == c
        assert strip(c) == strip(r)
    assert sample_candidates(r, n=3, temperature=0.0) == [r] * 3
    assert all(not v.blocks for v in sample_candidates(r, n=3, temperature=2.0))


def test_candidates_preserve_text_on_random_programs():
    for seed in range(100):
        r = synth.random_response(random.Random(seed))
        for c in sample_candidates(r, n=3, seed=seed):
            assert strip(c) == strip(r), seed
            assert parse(serialize(c)) == c, seed


# --- judge client -----------------------------------------------------------------

def http_judge(handler, **cfg):
    config = JudgeConfig(url="http://judge.test/compare", api_key="k", **cfg)
    return HttpJudge(config, transport=httpx.MockTransport(handler), sleep=lambda s: None)


def test_http_success_sends_payload():
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json={"winner": "B", "confidence": 0.7})

    j = http_judge(handler).compare("p", "a", "b")
    assert j == Judgment(B, 0.7)
    assert seen[0].headers["authorization"] == "Bearer k"
    assert b'"response_a"' in seen[0].content


def test_http_retries_transient():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json={"winner": "A", "confidence": 0.6})

    assert http_judge(handler).compare("p", "a", "b") == Judgment(A, 0.6)
    assert len(calls) == 3


def test_http_quota_exhausted():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(429)

    with pytest.raises(QuotaExceeded) as info:
        http_judge(handler, max_attempts=3).compare("p", "a", "b", pair="k1")
    assert len(calls) == 3 and info.value.pair == "k1"


def test_http_timeout():
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    with pytest.raises(JudgeTimeout):
        http_judge(handler, max_attempts=2).compare("p", "a", "b")


@pytest.mark.parametrize("body", [{"winner": "A", "confidence": 1.3}, {"winner": "C", "confidence": 0.5},
                                  {"confidence": 0.5}, {"winner": "A", "confidence": "high"}, [1, 2]])
def test_http_malformed(body):
    with pytest.raises(MalformedReply):
        http_judge(lambda req: httpx.Response(200, json=body)).compare("p", "a", "b")


def test_http_client_error_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400)

    with pytest.raises(JudgeError):
        http_judge(handler).compare("p", "a", "b")
    assert len(calls) == 1


def test_http_needs_url():
    with pytest.raises(JudgeError):
        HttpJudge(JudgeConfig())


def test_mock_judge():
    assert MockJudge(("A", 0.7)).compare("p", "x", "y") == Judgment(A, 0.7)
    with pytest.raises(MalformedReply):
        MockJudge(("A", 1.3))
    heuristic = MockJudge()
    assert heuristic.compare("p", "a b c", "a").winner is A
    assert heuristic.compare("p", "<sync/> a", "b").confidence == 0.5


def test_both_orders_recorded():
    judge = MockJudge(("A", 0.7))
    out = judge_candidates(judge, 0, "p", ["c0", "c1"], {"baseline": "bb", "original": "oo"})
    assert len(judge.calls) == 8
    assert [len(q.judgments) for q in out] == [4, 4]
    # A always wins, so the candidate wins when shown first and loses when shown second
    assert [j.won for j in out[0].judgments] == [True, False, True, False]
    assert out[0].ratio == pytest.approx(1.0)
    assert ("p", "c0", "bb") in judge.calls and ("p", "bb", "c0") in judge.calls


def test_failed_comparison_marks_quality_missing():
    class Flaky(MockJudge):
        def compare(self, prompt, a, b, pair=None):
            if "bad" in (a, b) and pair.order == "BA":
                raise MalformedReply("nope", pair)
            return super().compare(prompt, a, b, pair)

    out = judge_candidates(Flaky(("A", 0.9)), 2, "p", ["good", "bad"], {"baseline": "x"})
    assert out[0].ratio is not None and out[1].ratio is None
    assert out[1].errors[0].pair == ComparisonKey(2, 1, "baseline", "BA")


def test_in_flight_cap():
    live = 0
    peak = 0
    lock = threading.Lock()

    class Slow(MockJudge):
        def compare(self, prompt, a, b, pair=None):
            nonlocal live, peak
            with lock:
                live += 1
                peak = max(peak, live)
            time.sleep(0.01)
            with lock:
                live -= 1
            return Judgment(A, 0.5)

    judge_candidates(Slow(), 0, "p", [f"c{i}" for i in range(6)], {"r": "x"}, max_in_flight=3)
    assert 1 < peak <= 3


def test_single_fixture_is_a_valid_candidate_source():
    assert sample_candidates(parse(SINGLE), n=1, seed=0)[0] in (parse(SINGLE), parse("A B C D E F G"))
