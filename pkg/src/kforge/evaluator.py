"""Scoring of model predictions: token recall, LCS F-measure, judge, aggregates.

Token recall is multiset recall over metric tokens — every duplicated gold
token must be matched. The judge path parses a 0/1 score span from the
completion; parse failures flag the record instead of zeroing it so the
automated metrics stay comparable.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Corpus, METRIC, RAW, tokenize
from .errors import JudgeParseError, KforgeError, MissingScoreError
from .gateway import ChatRequest, LlmGateway, parse_tagged
from .qa_forge import QAPair
from .retriever import Index, RetrievalResult, overlap_class

logger = logging.getLogger("kforge.evaluator")

FACTOID_MAX_TOKENS = 8


def token_recall(gold: str, prediction: str) -> float:
    """Fraction of gold metric tokens matched (with multiplicity) in the prediction."""
    gold_tokens = tokenize(gold, METRIC)
    if not gold_tokens:
        return 1.0
    pred_counts = Counter(tokenize(prediction, METRIC))
    gold_counts = Counter(gold_tokens)
    matched = sum(min(count, pred_counts[token]) for token, count in gold_counts.items())
    return matched / len(gold_tokens)


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                current.append(prev[j - 1] + 1)
            else:
                current.append(max(prev[j], current[j - 1]))
        prev = current
    return prev[len(b)]


def rouge_l(gold: str, prediction: str) -> float:
    """LCS F-measure (beta=1) over metric tokens.

    Both sides empty after normalization scores 1.0; exactly one empty, 0.0.
    """
    gold_tokens = tokenize(gold, METRIC)
    pred_tokens = tokenize(prediction, METRIC)
    if not gold_tokens and not pred_tokens:
        return 1.0
    if not gold_tokens or not pred_tokens:
        return 0.0
    lcs = _lcs_length(gold_tokens, pred_tokens)
    if lcs == 0:
        return 0.0
    precision = lcs / len(pred_tokens)
    recall = lcs / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


@dataclass
class JudgeVerdict:
    score: int  # 0 or 1
    explanation: str


def judge(
    question: str, gold: str, prediction: str, gateway: LlmGateway
) -> JudgeVerdict:
    """Ask the judge model whether the prediction answers the question."""
    req = ChatRequest(
        template_id="judge",
        variables={
            "question": question,
            "gold_response": gold,
            "predicted_response": prediction,
        },
    )
    raw = gateway.complete(req)
    scores = parse_tagged(raw, "score").bodies
    if not scores:
        raise JudgeParseError("judge completion has no <score> span")
    value = scores[0].strip()
    if value not in ("0", "1"):
        raise JudgeParseError(f"judge score must be 0 or 1, got {value!r}")
    explanations = parse_tagged(raw, "explanation").bodies
    return JudgeVerdict(score=int(value), explanation=explanations[0].strip() if explanations else "")


@dataclass
class EvalRecord:
    question_id: str
    gold: str
    prediction: str
    retrieved: list[RetrievalResult]
    overlap: str  # no_overlap | some_overlap
    token_recall: float
    judge_score: int | None = None
    judge_explanation: str | None = None
    judge_error: str | None = None
    factoid: bool = False

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "gold": self.gold,
            "prediction": self.prediction,
            "retrieved": [
                {"passage_id": r.passage_id, "score": r.score, "rank": r.rank}
                for r in self.retrieved
            ],
            "overlap": self.overlap,
            "token_recall": self.token_recall,
            "judge_score": self.judge_score,
            "judge_explanation": self.judge_explanation,
            "judge_error": self.judge_error,
            "factoid": self.factoid,
        }


def _aggregate(records: list[EvalRecord]) -> dict:
    n = len(records)
    out: dict[str, object] = {"count": n}
    if n:
        out["mean_token_recall"] = sum(r.token_recall for r in records) / n
        judged = [r for r in records if r.judge_score is not None]
        out["judged_count"] = len(judged)
        if judged:
            out["mean_judge_score"] = sum(r.judge_score for r in judged) / len(judged)
    return out


@dataclass
class EvalReport:
    records: list[EvalRecord]
    overall: dict
    strata: dict[str, dict]
    factoid: dict
    missing_predictions: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "strata": self.strata,
            "factoid": self.factoid,
            "missing_predictions": {
                "count": len(self.missing_predictions),
                "question_ids": self.missing_predictions,
            },
            "records": [r.to_dict() for r in self.records],
        }


def evaluate_run(
    predictions: dict[str, str],
    pairs: list[QAPair],
    corpus: Corpus,
    index: Index,
    k: int = 5,
    judge_gateway: LlmGateway | None = None,
) -> EvalReport:
    """Score predictions against gold answers with overlap stratification.

    Pairs without a prediction are listed and excluded from every mean.
    Judge failures flag the record but keep its automated metrics.
    """
    records: list[EvalRecord] = []
    missing: list[str] = []
    for pair in pairs:
        if pair.id not in predictions:
            missing.append(pair.id)
            continue
        prediction = predictions[pair.id]
        gold = pair.canonical_answer
        retrieved = index.search(pair.question, k=k)
        gold_chunk = corpus.chunk_by_id(pair.source_chunk_id)
        record = EvalRecord(
            question_id=pair.id,
            gold=gold,
            prediction=prediction,
            retrieved=retrieved,
            overlap=overlap_class(retrieved, gold_chunk, index),
            token_recall=token_recall(gold, prediction),
            factoid=len(tokenize(gold, RAW)) <= FACTOID_MAX_TOKENS,
        )
        if judge_gateway is not None:
            try:
                verdict = judge(pair.question, gold, prediction, judge_gateway)
                record.judge_score = verdict.score
                record.judge_explanation = verdict.explanation
            except (JudgeParseError, KforgeError) as exc:
                record.judge_error = str(exc)
                logger.warning("judge failed for %s: %s", pair.id, exc)
        records.append(record)

    if missing:
        logger.warning("%d prediction(s) missing; excluded from aggregates", len(missing))

    return EvalReport(
        records=records,
        overall=_aggregate(records),
        strata={
            "no_overlap": _aggregate([r for r in records if r.overlap == "no_overlap"]),
            "some_overlap": _aggregate([r for r in records if r.overlap == "some_overlap"]),
        },
        factoid=_aggregate([r for r in records if r.factoid]),
        missing_predictions=missing,
    )


REGRESSION_KEYS = (
    "mmlu",
    "gsm8k_flexible",
    "gsm8k_strict",
    "hellaswag",
    "tqa_mc1",
    "tqa_mc2",
    "tqa_gen_rougel",
)


@dataclass
class RegressionReport:
    mmlu: float
    gsm8k_flexible: float
    gsm8k_strict: float
    hellaswag: float
    tqa_mc1: float
    tqa_mc2: float
    tqa_gen_rougel: float

    @property
    def components(self) -> dict[str, float]:
        """The five averaged component scores."""
        return {
            "mmlu": self.mmlu,
            "gsm8k": (self.gsm8k_flexible + self.gsm8k_strict) / 2,
            "hellaswag": self.hellaswag,
            "tqa_mc": (self.tqa_mc1 + self.tqa_mc2) / 2,
            "tqa_gen_rougel": self.tqa_gen_rougel,
        }

    @property
    def average(self) -> float:
        values = self.components.values()
        return sum(values) / len(values)

    def to_dict(self) -> dict:
        return {
            "raw": {key: getattr(self, key) for key in REGRESSION_KEYS},
            "components": self.components,
            "average": self.average,
        }


def regression_average(scores: dict | str | Path) -> RegressionReport:
    """Fold the seven raw benchmark scores into the five-way average."""
    if not isinstance(scores, dict):
        scores = json.loads(Path(scores).read_text(encoding="utf-8"))
    missing = [key for key in REGRESSION_KEYS if key not in scores]
    if missing:
        raise MissingScoreError(f"score file missing: {', '.join(missing)}")
    return RegressionReport(**{key: float(scores[key]) for key in REGRESSION_KEYS})
