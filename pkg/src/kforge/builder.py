"""Fine-tuning dataset assembly.

Strategies:

* ``dsf``      — one no-context example per question (canonical answer).
* ``raft``     — one in-context example per question; the whole question is
                 corrupted (distractor-only context) with probability
                 ``corruption_p``, else one oracle passage hides among
                 distractors.
* ``ca_raft``  — concatenation of the all-oracle pass, the all-distractor
                 pass, and the drawn pass over the same questions (3x size).
* ``pa_rag``   — one example per (question, answer) with per-pair bucket
                 draws, so paraphrases of one question can land in different
                 buckets.

All strategies then prefix the domain identifier (when configured) and
interleave replay examples by seeded shuffle. Output is deterministic given
(pairs, config, index, replay, seed).
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
from dataclasses import dataclass
from pathlib import Path

from .corpus import Chunk, Corpus, token_spans
from .errors import (
    EmptyTrainSplitError,
    IndexNotBuiltError,
    KforgeError,
    MissingChapterMapError,
    TemplateArityError,
)
from .gateway import ChatRequest, LlmGateway, TemplateStore
from .qa_forge import QAPair
from .retriever import Index, Passage, passage_overlaps_chunk
from .seeding import derive_rng, unit_float

logger = logging.getLogger("kforge.builder")

STRATEGIES = ("dsf", "raft", "ca_raft", "pa_rag")
BUCKETS = ("success", "failure", "none")
POLICIES = ("per_qa", "per_question", "per_chapter")
REPLAY_CATEGORIES = ("code", "math", "reasoning", "extraction", "safety", "writing", "other")

CONTEXT_TEMPLATE = "finetune_context"
NO_CONTEXT_TEMPLATE = "finetune_no_context"

# how deep to look for a retrieved oracle before synthesizing one from the chunk
ORACLE_SEARCH_DEPTH = 100


@dataclass
class DatasetConfig:
    strategy: str = "pa_rag"
    corruption_p: float = 0.4
    k_passages: int = 5
    max_paraphrases: int = 5
    chunk_tokens: int = 8000
    n_calls: int = 3
    domain_identifier: str | None = None
    replay_ratio: float = 0.1
    assignment_policy: str = "per_qa"
    seed: int = 0
    chapter_buckets: dict[str, str] | None = None

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.corruption_p <= 1.0:
            raise ValueError("corruption_p must be in [0, 1]")
        if self.k_passages < 1:
            raise ValueError("k_passages must be >= 1")
        if self.max_paraphrases < 1:
            raise ValueError("max_paraphrases must be >= 1")
        if self.chunk_tokens < 2:
            raise ValueError("chunk_tokens must be >= 2")
        if self.n_calls < 1:
            raise ValueError("n_calls must be >= 1")
        if self.replay_ratio < 0:
            raise ValueError("replay_ratio must be >= 0")
        if self.assignment_policy not in POLICIES:
            raise ValueError(f"unknown assignment policy {self.assignment_policy!r}")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "corruption_p": self.corruption_p,
            "k_passages": self.k_passages,
            "max_paraphrases": self.max_paraphrases,
            "chunk_tokens": self.chunk_tokens,
            "n_calls": self.n_calls,
            "domain_identifier": self.domain_identifier,
            "replay_ratio": self.replay_ratio,
            "assignment_policy": self.assignment_policy,
            "seed": self.seed,
            "chapter_buckets": self.chapter_buckets,
        }


@dataclass(frozen=True)
class ReplayItem:
    """General-skill rehearsal pair; output is the model's own completion."""

    category: str
    input: str
    output: str

    def __post_init__(self) -> None:
        if self.category not in REPLAY_CATEGORIES:
            raise ValueError(
                f"unknown replay category {self.category!r}; expected one of {REPLAY_CATEGORIES}"
            )


@dataclass
class TrainingExample:
    example_id: str
    question: str  # identifier-prefixed when configured
    context: list[Passage]
    oracle_present: bool
    oracle_position: int | None
    answer: str
    bucket: str  # success | failure | none
    origin: str  # domain | replay
    source_chunk_id: str | None = None
    variant: str | None = None  # ca_raft pass: raft0 | raft1 | raftp
    identifier: str = ""
    category: str | None = None  # replay items only

    def __post_init__(self) -> None:
        if self.bucket not in BUCKETS:
            raise ValueError(f"unknown bucket {self.bucket!r}")
        if self.oracle_present != (self.bucket == "success"):
            raise ValueError("oracle_present must hold exactly for success-bucket examples")
        if (self.oracle_position is not None) != self.oracle_present:
            raise ValueError("oracle_position must be set iff an oracle is present")

    @property
    def bare_question(self) -> str:
        if self.identifier and self.question.startswith(self.identifier + " "):
            return self.question[len(self.identifier) + 1:]
        return self.question


def assign_bucket(
    pair_id: str,
    answer_index: int,
    cfg: DatasetConfig,
    chapter: str | None = None,
    policy: str | None = None,
) -> str:
    """Draw the retrieval bucket for one (question, answer) pair.

    per_qa draws independently per answer; per_question shares one draw across
    a question's paraphrases; per_chapter looks the chapter up in the
    configured map. Draws are hash-derived from the run seed, so they are
    reproducible and order-independent.
    """
    policy = policy or cfg.assignment_policy
    if policy == "per_chapter":
        if not cfg.chapter_buckets:
            raise MissingChapterMapError("per_chapter policy requires chapter_buckets")
        if chapter is None or chapter not in cfg.chapter_buckets:
            raise MissingChapterMapError(f"no bucket mapping for chapter {chapter!r}")
        bucket = cfg.chapter_buckets[chapter]
        if bucket not in ("success", "failure"):
            raise ValueError(f"chapter map value must be success/failure, got {bucket!r}")
        return bucket
    if policy == "per_question":
        draw = unit_float(cfg.seed, "bucket", pair_id)
    else:
        draw = unit_float(cfg.seed, "bucket", pair_id, answer_index)
    return "failure" if draw < cfg.corruption_p else "success"


def _synthetic_oracle(gold_chunk: Chunk, gold_text: str, passage_tokens: int) -> Passage:
    """Cut a passage-sized prefix from the gold chunk when retrieval misses it."""
    spans = token_spans(gold_text)
    if len(spans) > passage_tokens:
        end_rel = spans[passage_tokens][0]
    else:
        end_rel = len(gold_text)
    start, _ = gold_chunk.char_span
    return Passage(
        id=f"{gold_chunk.id}:oracle",
        doc_id=gold_chunk.doc_id,
        char_span=(start, start + end_rel),
        token_count=min(len(spans), passage_tokens),
        text=gold_text[:end_rel],
    )


def build_context(
    question: str,
    bucket: str,
    index: Index | None,
    gold_chunk: Chunk,
    gold_text: str,
    k: int,
    rng: random.Random,
) -> tuple[list[Passage], int | None]:
    """Assemble the k-passage context for one example.

    success: one oracle passage (top-ranked retrieved passage intersecting the
    gold chunk, else a synthetic cut of it) at a uniformly random slot, the
    rest top-ranked non-overlapping passages. failure: k top-ranked
    non-overlapping passages. Short retrievals are padded with random
    non-overlapping passages.
    """
    if index is None:
        raise IndexNotBuiltError("context construction requires a built index")
    if bucket not in ("success", "failure"):
        raise ValueError(f"context built only for success/failure buckets, got {bucket!r}")

    results = index.search(question, k=max(ORACLE_SEARCH_DEPTH, k + 1))
    retrieved = [index.passage(r.passage_id) for r in results]
    overlapping = [p for p in retrieved if passage_overlaps_chunk(p, gold_chunk)]
    distractors = [p for p in retrieved if not passage_overlaps_chunk(p, gold_chunk)]

    n_distractors = k - 1 if bucket == "success" else k
    chosen = list(distractors[:n_distractors])
    if len(chosen) < n_distractors:
        taken = {p.id for p in chosen}
        pool = sorted(
            (
                p
                for p in index.passages
                if p.id not in taken and not passage_overlaps_chunk(p, gold_chunk)
            ),
            key=lambda p: p.id,
        )
        needed = n_distractors - len(chosen)
        if len(pool) < needed:
            raise KforgeError(
                f"corpus has only {len(chosen) + len(pool)} non-overlapping passages; "
                f"{n_distractors} needed"
            )
        chosen.extend(rng.sample(pool, needed))

    if bucket == "failure":
        return chosen, None

    oracle = overlapping[0] if overlapping else _synthetic_oracle(
        gold_chunk, gold_text, index.passage_tokens
    )
    slot = rng.randrange(k)
    context = chosen[:slot] + [oracle] + chosen[slot:]
    return context, slot + 1


def _drawn_bucket(pair: QAPair, answer_index: int, cfg: DatasetConfig,
                  corpus: Corpus, policy: str) -> str:
    chapter = None
    if policy == "per_chapter" or cfg.assignment_policy == "per_chapter":
        chapter = corpus.chunk_by_id(pair.source_chunk_id).doc_id
        policy = "per_chapter"
    return assign_bucket(pair.id, answer_index, cfg, chapter=chapter, policy=policy)


def build_dataset(
    pairs: list[QAPair],
    cfg: DatasetConfig,
    index: Index | None,
    corpus: Corpus,
    replay: list[ReplayItem] | None = None,
) -> list[TrainingExample]:
    """Assemble training examples for the configured strategy.

    Expects train-split pairs only. Returns domain and replay examples
    interleaved by a seeded shuffle.
    """
    offenders = [p for p in pairs if p.split != "train"]
    if offenders:
        raise ValueError(
            f"build_dataset expects train-split pairs; got split={offenders[0].split!r}"
        )
    if not pairs:
        raise EmptyTrainSplitError("no train-split QA pairs to build from")

    identifier = cfg.domain_identifier or ""

    def make_example(
        pair: QAPair, answer_index: int, bucket: str, variant: str | None
    ) -> TrainingExample:
        suffix = f":{variant}" if variant else ""
        question = f"{identifier} {pair.question}" if identifier else pair.question
        if bucket == "none":
            context: list[Passage] = []
            oracle_position = None
        else:
            gold_chunk = corpus.chunk_by_id(pair.source_chunk_id)
            rng = derive_rng(cfg.seed, "context", pair.id, answer_index, variant)
            context, oracle_position = build_context(
                pair.question, bucket, index, gold_chunk,
                corpus.chunk_text(gold_chunk), cfg.k_passages, rng,
            )
        return TrainingExample(
            example_id=f"{cfg.strategy}:{pair.id}:a{answer_index}{suffix}",
            question=question,
            context=context,
            oracle_present=bucket == "success",
            oracle_position=oracle_position,
            answer=pair.answers[answer_index],
            bucket=bucket,
            origin="domain",
            source_chunk_id=pair.source_chunk_id,
            variant=variant,
            identifier=identifier,
        )

    domain: list[TrainingExample] = []
    if cfg.strategy == "dsf":
        domain = [make_example(p, 0, "none", None) for p in pairs]
    elif cfg.strategy == "raft":
        for pair in pairs:
            bucket = _drawn_bucket(pair, 0, cfg, corpus, policy="per_question")
            domain.append(make_example(pair, 0, bucket, None))
    elif cfg.strategy == "ca_raft":
        for pair in pairs:
            domain.append(make_example(pair, 0, "success", "raft0"))
        for pair in pairs:
            domain.append(make_example(pair, 0, "failure", "raft1"))
        for pair in pairs:
            bucket = _drawn_bucket(pair, 0, cfg, corpus, policy="per_question")
            domain.append(make_example(pair, 0, bucket, "raftp"))
    else:  # pa_rag
        for pair in pairs:
            for answer_index in range(len(pair.answers)):
                bucket = _drawn_bucket(pair, answer_index, cfg, corpus,
                                       policy=cfg.assignment_policy)
                domain.append(make_example(pair, answer_index, bucket, None))

    replay = replay or []
    n_replay = math.ceil(cfg.replay_ratio * len(domain))
    if n_replay > len(replay):
        if replay:
            logger.warning(
                "replay buffer has %d items; %d requested by replay_ratio=%.3f",
                len(replay), n_replay, cfg.replay_ratio,
            )
        n_replay = len(replay)
    replay_examples = [
        TrainingExample(
            example_id=f"replay:{i:05d}",
            question=item.input,
            context=[],
            oracle_present=False,
            oracle_position=None,
            answer=item.output,
            bucket="none",
            origin="replay",
            category=item.category,
        )
        for i, item in enumerate(replay[:n_replay])
    ]

    combined = domain + replay_examples
    derive_rng(cfg.seed, "interleave", cfg.strategy).shuffle(combined)
    return combined


def build_replay(
    inputs: list[tuple[str, str]], gateway: LlmGateway
) -> list[ReplayItem]:
    """Complete each (category, input) through the target model.

    The output is the model's own completion, never a gold label. Failed
    completions are dropped with a warning.
    """
    items: list[ReplayItem] = []
    for category, text in inputs:
        req = ChatRequest(template_id="replay", variables={"input": text})
        try:
            output = gateway.complete(req)
        except KforgeError as exc:
            logger.warning("replay completion failed for %r: %s", text[:40], exc)
            continue
        items.append(ReplayItem(category=category, input=text, output=output))
    return items


def _context_slots(template_text: str) -> list[str]:
    return sorted(set(re.findall(r"\{(document_\d+)\}", template_text)),
                  key=lambda name: int(name.rsplit("_", 1)[1]))


def render(example: TrainingExample, templates: TemplateStore) -> dict[str, str]:
    """Instantiate the fine-tuning prompt/completion for one example.

    Context examples use the passage template (its slot count must match the
    context length); no-context examples (dsf, replay) use the bare template.
    The completion wraps the answer in response tokens as the templates
    instruct.
    """
    if example.context:
        template_id = CONTEXT_TEMPLATE
        text = templates.text(template_id)
        slots = _context_slots(text)
        if len(slots) != len(example.context):
            raise TemplateArityError(
                f"template {template_id!r} has {len(slots)} passage slots; "
                f"example {example.example_id} has {len(example.context)}"
            )
        variables = {slot: passage.text for slot, passage in zip(slots, example.context)}
        if example.identifier:
            variables["data_identifier"] = example.identifier
            variables["question"] = example.bare_question
        else:
            # drop the identifier slot and its separator space entirely
            text = text.replace("{data_identifier} ", "")
            variables["question"] = example.question
        prompt = templates.render_text(text, variables)
    else:
        prompt = templates.render(NO_CONTEXT_TEMPLATE, {"question": example.question})
    return {"prompt": prompt, "completion": f"<response>{example.answer}</response>"}


def dataset_rows(
    examples: list[TrainingExample], templates: TemplateStore, cfg: DatasetConfig
) -> list[dict]:
    rows = []
    for example in examples:
        rendered = render(example, templates)
        meta = {
            "bucket": example.bucket,
            "oracle_present": example.oracle_present,
            "oracle_position": example.oracle_position,
            "origin": example.origin,
            "strategy": cfg.strategy,
            "source_chunk_id": example.source_chunk_id,
        }
        if example.variant:
            meta["variant"] = example.variant
        if example.category:
            meta["category"] = example.category
        rows.append(
            {
                "example_id": example.example_id,
                "prompt": rendered["prompt"],
                "completion": rendered["completion"],
                "meta": meta,
            }
        )
    return rows


def save_dataset(rows: list[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def save_replay(items: list[ReplayItem], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for item in items:
            fh.write(
                json.dumps(
                    {"category": item.category, "input": item.input, "output": item.output},
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )


def load_replay(path: str | Path) -> list[ReplayItem]:
    items = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            items.append(
                ReplayItem(category=row["category"], input=row["input"], output=row["output"])
            )
    return items
