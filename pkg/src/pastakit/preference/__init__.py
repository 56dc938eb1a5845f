from pastakit.preference.judge import (
    CandidateQuality,
    ComparisonKey,
    HttpJudge,
    JudgeConfig,
    MockJudge,
    judge_candidates,
    parse_reply,
)
from pastakit.preference.scoring import (
    QUALITY_ONLY,
    Candidate,
    Efficiency,
    Judgment,
    PreferenceRecord,
    Side,
    bonbon_loss,
    efficiency_metric,
    lambda_label,
    parse_lambda,
    quality_ratio,
    sample_candidates,
    score,
    select_pair,
)

__all__ = [
    "QUALITY_ONLY", "Candidate", "CandidateQuality", "ComparisonKey", "Efficiency", "HttpJudge",
    "JudgeConfig", "Judgment", "MockJudge", "PreferenceRecord", "Side", "bonbon_loss",
    "efficiency_metric", "judge_candidates", "lambda_label", "parse_lambda", "parse_reply", "quality_ratio",
    "sample_candidates", "score", "select_pair",
]
