"""Lexical passage index: fixed-size tiling passages, BM25 scoring, top-k search.

Documents are tiled into passages of at most ``passage_tokens`` whitespace
tokens (the last passage of a document may be shorter). Scoring uses BM25
(k1=1.2, b=0.75) over metric tokens with the always-positive idf variant
``ln(1 + (N - df + 0.5)/(df + 0.5))``. Ties break on passage id so results
are fully deterministic. The index round-trips through a single
self-describing JSON file.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .corpus import Chunk, Document, METRIC, token_spans, tokenize
from .errors import EmptyCorpusError, IndexNotBuiltError

INDEX_MAGIC = "kforge-index"
INDEX_VERSION = 1

BM25_K1 = 1.2
BM25_B = 0.75

DEFAULT_PASSAGE_TOKENS = 512


@dataclass(frozen=True)
class Passage:
    id: str
    doc_id: str
    char_span: tuple[int, int]
    token_count: int
    text: str


@dataclass(frozen=True)
class RetrievalResult:
    passage_id: str
    score: float
    rank: int


def _tile_passages(doc: Document, passage_tokens: int) -> list[Passage]:
    spans = token_spans(doc.text)
    n = len(spans)
    end_of_text = len(doc.text)
    passages: list[Passage] = []
    start_char = 0
    for index, first in enumerate(range(0, max(n, 1), passage_tokens)):
        next_first = first + passage_tokens
        end_char = spans[next_first][0] if next_first < n else end_of_text
        passages.append(
            Passage(
                id=f"{doc.id}:p{index:04d}",
                doc_id=doc.id,
                char_span=(start_char, end_char),
                token_count=min(next_first, n) - first if n else 0,
                text=doc.text[start_char:end_char],
            )
        )
        start_char = end_char
    return passages


class Index:
    """Immutable after build; concurrent searches are safe."""

    def __init__(self, passages: list[Passage], passage_tokens: int):
        self.passages = passages
        self.passage_tokens = passage_tokens
        self._by_id = {p.id: p for p in passages}
        # per-passage term frequencies over metric tokens
        self._tf: list[Counter[str]] = [Counter(tokenize(p.text, METRIC)) for p in passages]
        self._lengths = [sum(tf.values()) for tf in self._tf]
        n_passages = len(passages)
        self._avgdl = (sum(self._lengths) / n_passages) if n_passages else 0.0
        self._postings: dict[str, list[tuple[int, int]]] = {}
        for idx, tf in enumerate(self._tf):
            for term, count in tf.items():
                self._postings.setdefault(term, []).append((idx, count))

    def __len__(self) -> int:
        return len(self.passages)

    def passage(self, passage_id: str) -> Passage:
        return self._by_id[passage_id]

    def search(self, query: str, k: int) -> list[RetrievalResult]:
        """Top-k passages by BM25; only passages sharing a term are candidates."""
        if k < 1:
            raise ValueError("k must be >= 1")
        n = len(self.passages)
        scores: dict[int, float] = {}
        for term in sorted(set(tokenize(query, METRIC))):
            postings = self._postings.get(term)
            if not postings:
                continue
            df = len(postings)
            idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
            for idx, tf in postings:
                if self._avgdl > 0:
                    norm = 1.0 - BM25_B + BM25_B * self._lengths[idx] / self._avgdl
                else:
                    norm = 1.0
                gain = idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
                scores[idx] = scores.get(idx, 0.0) + gain

        ranked = sorted(
            scores.items(), key=lambda item: (-item[1], self.passages[item[0]].id)
        )[:k]
        return [
            RetrievalResult(passage_id=self.passages[idx].id, score=score, rank=rank)
            for rank, (idx, score) in enumerate(ranked, start=1)
        ]

    def save(self, path: str | Path) -> None:
        payload = {
            "magic": INDEX_MAGIC,
            "version": INDEX_VERSION,
            "passage_tokens": self.passage_tokens,
            "passages": [
                {
                    "id": p.id,
                    "doc_id": p.doc_id,
                    "char_span": list(p.char_span),
                    "token_count": p.token_count,
                    "text": p.text,
                }
                for p in self.passages
            ],
        }
        Path(path).write_text(
            json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":")),
            encoding="utf-8",
        )


def build_index(docs: list[Document], passage_tokens: int = DEFAULT_PASSAGE_TOKENS) -> Index:
    if not docs:
        raise EmptyCorpusError("cannot index an empty corpus")
    if passage_tokens < 1:
        raise ValueError("passage_tokens must be >= 1")
    passages: list[Passage] = []
    for doc in docs:
        passages.extend(_tile_passages(doc, passage_tokens))
    return Index(passages=passages, passage_tokens=passage_tokens)


def load_index(path: str | Path) -> Index:
    path = Path(path)
    if not path.is_file():
        raise IndexNotBuiltError(f"index file not found: {path}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("magic") != INDEX_MAGIC:
        raise IndexNotBuiltError(f"{path}: not an index file")
    passages = [
        Passage(
            id=p["id"],
            doc_id=p["doc_id"],
            char_span=(p["char_span"][0], p["char_span"][1]),
            token_count=p["token_count"],
            text=p["text"],
        )
        for p in payload["passages"]
    ]
    return Index(passages=passages, passage_tokens=payload["passage_tokens"])


def spans_intersect(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def passage_overlaps_chunk(passage: Passage, gold_chunk: Chunk) -> bool:
    return passage.doc_id == gold_chunk.doc_id and spans_intersect(
        passage.char_span, gold_chunk.char_span
    )


def overlap_class(
    results: list[RetrievalResult], gold_chunk: Chunk, index: Index
) -> str:
    """``some_overlap`` iff any retrieved passage intersects the gold chunk's span."""
    for result in results:
        if passage_overlaps_chunk(index.passage(result.passage_id), gold_chunk):
            return "some_overlap"
    return "no_overlap"
