"""Shared fixtures: synthetic corpora, indexes, and the offline gateway."""

from __future__ import annotations

import random

import pytest

from kforge.corpus import Corpus, Document, build_corpus
from kforge.gateway import LlmGateway, MockBackend
from kforge.qa_forge import QAPair
from kforge.retriever import Index, build_index


def make_word_doc(doc_id: str, n_tokens: int, rng: random.Random,
                  vocab_size: int = 600, title: str | None = None) -> Document:
    """Random-word document with a title line, deterministic per rng state."""
    words = [f"w{rng.randrange(vocab_size):04d}" for _ in range(max(n_tokens - 2, 0))]
    title = title or f"Title {doc_id}"
    text = title + "\n" + " ".join(words)
    return Document(id=doc_id, title=title, text=text, domain_name="test")


def make_pairs(corpus: Corpus, per_chunk: int = 2, answers_per: int = 1,
               split: str = "train") -> list[QAPair]:
    """QA pairs whose text quotes the head of their source chunk."""
    pairs = []
    for ck in corpus.chunks:
        head = " ".join(corpus.chunk_text(ck).split()[:6])
        for j in range(per_chunk):
            pairs.append(
                QAPair(
                    id=f"{ck.id}:q{j}",
                    question=f"What about {head} item {j}?",
                    answers=tuple(f"answer {k} regarding {head}" for k in range(answers_per)),
                    source_chunk_id=ck.id,
                    split=split,
                )
            )
    return pairs


@pytest.fixture
def mock_gateway() -> LlmGateway:
    return LlmGateway(MockBackend(seed=0))


@pytest.fixture
def small_corpus() -> Corpus:
    rng = random.Random(42)
    docs = [make_word_doc(f"doc{i}", 900, rng) for i in range(4)]
    return build_corpus(docs, chunk_tokens=400)  # 200-token chunks


@pytest.fixture
def small_index(small_corpus: Corpus) -> Index:
    return build_index(small_corpus.documents, passage_tokens=64)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance" in rep.nodeid and rep.when == "call":
                lines.append(f"{label}  {rep.nodeid.split('::', 1)[-1]}")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split("  ", 1)[1]):
            terminalreporter.write_line(line)
