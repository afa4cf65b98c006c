"""Synthetic QA generation, answer multiplicity, coverage, and test curation.

Every operation here is driven through the gateway so the whole stage runs
offline against the mock backend. Question identity is always judged after
metric normalization (lowercase, punctuation stripped).
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, replace
from pathlib import Path

from .corpus import Chunk, Corpus, METRIC, RAW, metric_token_set, tokenize
from .errors import (
    GenerationEmptyError,
    KforgeError,
    LabelMissingError,
    UnknownChunkError,
)
from .gateway import ChatRequest, LlmGateway, SamplingParams, parse_labeled_line, parse_tagged
from .seeding import digest_int

logger = logging.getLogger("kforge.qa_forge")

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class QAPair:
    """A question with one or more answers; answers[0] is canonical."""

    id: str
    question: str
    answers: tuple[str, ...]
    source_chunk_id: str
    split: str = ""

    def __post_init__(self) -> None:
        if not self.answers:
            raise ValueError("QAPair.answers must be non-empty")
        if self.split and self.split not in SPLITS:
            raise ValueError(f"unknown split label: {self.split!r}")

    @property
    def canonical_answer(self) -> str:
        return self.answers[0]


@dataclass
class CoverageReport:
    per_chunk: dict[str, float]
    per_doc: dict[str, float]
    overall: float

    def to_dict(self) -> dict:
        return {
            "per_chunk": self.per_chunk,
            "per_doc": self.per_doc,
            "overall": self.overall,
        }


def _normalized(text: str) -> str:
    return " ".join(tokenize(text, METRIC))


def _pair_spans(raw: str) -> list[tuple[str, str]]:
    """Pair <question>/<answer> bodies by strict interleaving order.

    Orphans (question followed by question, answer with no pending question,
    trailing question) are dropped with a warning.
    """
    questions = parse_tagged(raw, "question").spans
    answers = parse_tagged(raw, "answer").spans
    merged = sorted(questions + answers, key=lambda s: s.start)

    pairs: list[tuple[str, str]] = []
    pending: str | None = None
    dropped = 0
    for span in merged:
        if span.tag == "question":
            if pending is not None:
                dropped += 1
            pending = span.body
        else:
            if pending is None:
                dropped += 1
            else:
                pairs.append((pending, span.body))
                pending = None
    if pending is not None:
        dropped += 1
    if dropped:
        logger.warning("dropped %d orphan question/answer tag(s)", dropped)
    return pairs


def generate_qa(
    chunk: Chunk,
    chunk_text: str,
    gateway: LlmGateway,
    n_calls: int,
    seed: int = 0,
    early_stop_coverage: float | None = None,
    sampling: SamplingParams | None = None,
) -> list[QAPair]:
    """Prompt for QA pairs *n_calls* times over one chunk and merge the results.

    Duplicate questions (after normalization) keep their first occurrence.
    With *early_stop_coverage* set, calls stop once the chunk's token coverage
    reaches the threshold.
    """
    if n_calls < 1:
        raise ValueError("n_calls must be >= 1")
    base_sampling = sampling or SamplingParams()

    collected: list[QAPair] = []
    seen: set[str] = set()
    chunk_tokens = metric_token_set(chunk_text)
    covered: set[str] = set()

    for call_index in range(n_calls):
        call_seed = digest_int(seed, "qa_generation", chunk.id, call_index) % 2**31
        req = ChatRequest(
            template_id="qa_generation",
            variables={"document": chunk_text},
            sampling=replace(base_sampling, seed=call_seed),
        )
        raw = gateway.complete(req)
        pairs = _pair_spans(raw)
        if not pairs:
            # salvage policy: one re-prompt with a bumped seed
            logger.warning("call %d for chunk %s yielded no pairs; re-prompting once",
                           call_index, chunk.id)
            retry = replace(req, sampling=replace(req.sampling, seed=call_seed + 1_000_003))
            pairs = _pair_spans(gateway.complete(retry))

        for question, answer in pairs:
            question, answer = question.strip(), answer.strip()
            if not question or not answer:
                logger.warning("dropped blank question/answer for chunk %s", chunk.id)
                continue
            key = _normalized(question)
            if not key or key in seen:
                continue
            seen.add(key)
            pair_id = f"qa-{digest_int(chunk.id, key):016x}"
            collected.append(
                QAPair(
                    id=pair_id,
                    question=question,
                    answers=(answer,),
                    source_chunk_id=chunk.id,
                )
            )
            covered |= metric_token_set(question) | metric_token_set(answer)

        if (
            early_stop_coverage is not None
            and chunk_tokens
            and len(chunk_tokens & covered) / len(chunk_tokens) >= early_stop_coverage
        ):
            break

    if not collected:
        raise GenerationEmptyError(f"no QA pairs generated for chunk {chunk.id}")
    return collected


def add_multiplicity(
    pair: QAPair,
    chunk_text: str,
    gateway: LlmGateway,
    max_paraphrases: int,
    seed: int = 0,
    sampling: SamplingParams | None = None,
) -> QAPair:
    """Extend a pair's answers with re-prompted alternatives.

    The canonical answer stays at index 0; duplicates under metric
    normalization are pruned and the list is capped at *max_paraphrases*.
    Gateway failures leave the pair unchanged (with a warning).
    """
    if max_paraphrases < 1:
        raise ValueError("max_paraphrases must be >= 1")
    call_seed = digest_int(seed, "answer_multiplicity", pair.id) % 2**31
    req = ChatRequest(
        template_id="answer_multiplicity",
        variables={"document": chunk_text, "question": pair.question},
        sampling=replace(sampling or SamplingParams(), seed=call_seed),
    )
    try:
        parse = gateway.complete_tagged(req, "answer")
    except KforgeError as exc:
        logger.warning("multiplicity call failed for %s: %s", pair.id, exc)
        return pair

    merged: list[str] = []
    seen: set[str] = set()
    for answer in list(pair.answers) + [s.strip() for s in parse.bodies]:
        if not answer:
            continue
        key = _normalized(answer)
        if key in seen:
            continue
        seen.add(key)
        merged.append(answer)
        if len(merged) >= max_paraphrases:
            break
    return replace(pair, answers=tuple(merged))


def coverage(corpus: Corpus, pairs: list[QAPair]) -> CoverageReport:
    """Unique-metric-token coverage of each chunk by its QA pairs' text.

    Per-document and overall figures are token-count-weighted means over
    chunks. A chunk with no metric tokens counts as fully covered.
    """
    qa_tokens_by_chunk: dict[str, set[str]] = {}
    for pair in pairs:
        if not corpus.has_chunk(pair.source_chunk_id):
            raise UnknownChunkError(f"pair {pair.id}: unknown chunk {pair.source_chunk_id}")
        bucket = qa_tokens_by_chunk.setdefault(pair.source_chunk_id, set())
        bucket |= metric_token_set(pair.question)
        for answer in pair.answers:
            bucket |= metric_token_set(answer)

    per_chunk: dict[str, float] = {}
    for ck in corpus.chunks:
        chunk_tokens = metric_token_set(corpus.chunk_text(ck))
        if not chunk_tokens:
            per_chunk[ck.id] = 1.0
            continue
        covered = chunk_tokens & qa_tokens_by_chunk.get(ck.id, set())
        per_chunk[ck.id] = len(covered) / len(chunk_tokens)

    def weighted(chunks: list[Chunk]) -> float:
        total = sum(c.token_count for c in chunks)
        if total == 0:
            return sum(per_chunk[c.id] for c in chunks) / len(chunks) if chunks else 1.0
        return sum(per_chunk[c.id] * c.token_count for c in chunks) / total

    per_doc = {
        doc.id: weighted([c for c in corpus.chunks if c.doc_id == doc.id])
        for doc in corpus.documents
    }
    return CoverageReport(
        per_chunk=per_chunk, per_doc=per_doc, overall=weighted(corpus.chunks)
    )


def filter_test(
    pairs: list[QAPair], gateway: LlmGateway
) -> tuple[list[QAPair], list[QAPair]]:
    """Partition test pairs into (kept, removed) via the completeness filter.

    Unparseable verdicts and per-item gateway failures keep the pair
    (dropping data silently is worse than keeping a contextual question).
    """
    offenders = [p for p in pairs if p.split != "test"]
    if offenders:
        raise ValueError(f"filter_test expects test-split pairs; got split={offenders[0].split!r}")

    kept: list[QAPair] = []
    removed: list[QAPair] = []
    for pair in pairs:
        req = ChatRequest(template_id="test_filter", variables={"question": pair.question})
        try:
            raw = gateway.complete(req)
            verdict = parse_labeled_line(raw, "Scoring").strip("*").strip().lower()
        except (LabelMissingError, KforgeError) as exc:
            logger.warning("filter verdict unavailable for %s (%s); keeping", pair.id, exc)
            kept.append(pair)
            continue
        if verdict == "incomplete":
            removed.append(pair)
        else:
            if verdict != "complete":
                logger.warning("unrecognized verdict %r for %s; keeping", verdict, pair.id)
            kept.append(pair)
    return kept, removed


def extract_factoid(pairs: list[QAPair]) -> list[QAPair]:
    """Pairs whose canonical answer is at most eight whitespace tokens."""
    return [p for p in pairs if len(tokenize(p.canonical_answer, RAW)) <= 8]


def split_pairs(
    pairs: list[QAPair], ratios: tuple[float, float, float], seed: int
) -> list[QAPair]:
    """Assign train/val/test labels by seeded shuffle + contiguous cut.

    Returns new pairs in the original order.
    """
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")

    order = list(range(len(pairs)))
    random.Random(seed).shuffle(order)
    n = len(pairs)
    train_end = round(ratios[0] * n)
    val_end = round((ratios[0] + ratios[1]) * n)

    label_by_index: dict[int, str] = {}
    for position, idx in enumerate(order):
        if position < train_end:
            label_by_index[idx] = "train"
        elif position < val_end:
            label_by_index[idx] = "val"
        else:
            label_by_index[idx] = "test"
    return [replace(p, split=label_by_index[i]) for i, p in enumerate(pairs)]


def save_pairs(pairs: list[QAPair], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in pairs:
            row = {
                "id": p.id,
                "question": p.question,
                "answers": list(p.answers),
                "source_chunk_id": p.source_chunk_id,
                "split": p.split,
            }
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def load_pairs(path: str | Path) -> list[QAPair]:
    pairs = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            pairs.append(
                QAPair(
                    id=row["id"],
                    question=row["question"],
                    answers=tuple(row["answers"]),
                    source_chunk_id=row["source_chunk_id"],
                    split=row.get("split", ""),
                )
            )
    return pairs
