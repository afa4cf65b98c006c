"""Corpus ingestion, tokenization, and chunking.

Documents are plain text / markdown. Two token units are used throughout the
pipeline: ``raw`` tokens (maximal non-whitespace runs, used for chunk and
passage sizing because their spans map back into the text) and ``metric``
tokens (lowercased, punctuation stripped, used for coverage, recall, and
lexical retrieval scoring).
"""

from __future__ import annotations

import hashlib
import json
import re
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from .errors import EmptyDocumentError, EncodingError

_TOKEN_RUN = re.compile(r"\S+")

CORPUS_MAGIC = "kforge-corpus"
CORPUS_VERSION = 1


@dataclass(frozen=True)
class TokenizerSpec:
    """Token unit selector: ``raw`` whitespace runs or normalized ``metric`` tokens."""

    mode: str = "raw"

    def __post_init__(self) -> None:
        if self.mode not in ("raw", "metric"):
            raise ValueError(f"unknown tokenizer mode: {self.mode!r}")


RAW = TokenizerSpec("raw")
METRIC = TokenizerSpec("metric")


@lru_cache(maxsize=1 << 16)
def _normalize_token(token: str) -> str:
    """Lowercase and drop Unicode punctuation characters."""
    lowered = token.lower()
    return "".join(ch for ch in lowered if unicodedata.category(ch)[0] != "P")


def token_spans(text: str) -> list[tuple[int, int]]:
    """Half-open character spans of whitespace-delimited runs, in order."""
    return [m.span() for m in _TOKEN_RUN.finditer(text)]


def tokenize(text: str, spec: TokenizerSpec = METRIC) -> list[str]:
    """Deterministic token list for *text* under *spec*.

    metric mode lowercases, strips punctuation, and drops runs that normalize
    to nothing; raw mode splits on whitespace only.
    """
    runs = _TOKEN_RUN.findall(text)
    if spec.mode == "raw":
        return runs
    normalized = (_normalize_token(run) for run in runs)
    return [tok for tok in normalized if tok]


def metric_token_set(text: str) -> set[str]:
    return set(tokenize(text, METRIC))


@dataclass(frozen=True)
class Document:
    """One corpus unit; id is a content hash so identical bytes collide on purpose."""

    id: str
    title: str
    text: str
    domain_name: str


@dataclass(frozen=True)
class Chunk:
    """A contiguous slice of a document, sized in raw tokens.

    char_span is half-open into Document.text; chunks of a document tile it
    exactly in index order.
    """

    id: str
    doc_id: str
    index: int
    char_span: tuple[int, int]
    token_count: int


def ingest(source: str | Path | bytes, domain_name: str) -> Document:
    """Build a Document from a file path or raw bytes.

    Title is the first non-empty line; the id is derived from the content
    hash, so byte-identical inputs yield the same id.
    """
    if isinstance(source, (str, Path)):
        raw = Path(source).read_bytes()
    else:
        raw = source
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise EncodingError(f"input is not valid UTF-8: {exc}") from exc

    title = next((line.strip() for line in text.splitlines() if line.strip()), "")
    if not title:
        raise EmptyDocumentError("document is empty or whitespace-only")

    doc_id = "doc-" + hashlib.sha256(raw).hexdigest()[:16]
    return Document(id=doc_id, title=title, text=text, domain_name=domain_name)


def chunk(doc: Document, max_tokens: int) -> list[Chunk]:
    """Split *doc* at raw-token boundaries.

    A document of at most *max_tokens* tokens stays whole; otherwise it is cut
    into consecutive chunks of ``max_tokens // 2`` tokens (the last one may be
    shorter). Chunk spans tile the text: boundaries sit at the start of the
    first token of the next chunk, so inter-token whitespace stays with the
    preceding chunk.
    """
    if max_tokens < 2:
        raise ValueError(f"max_tokens must be >= 2, got {max_tokens}")
    spans = token_spans(doc.text)
    n_tokens = len(spans)
    end_of_text = len(doc.text)

    if n_tokens <= max_tokens:
        return [
            Chunk(
                id=f"{doc.id}:c000",
                doc_id=doc.id,
                index=0,
                char_span=(0, end_of_text),
                token_count=n_tokens,
            )
        ]

    size = max_tokens // 2
    chunks: list[Chunk] = []
    start_char = 0
    for index, first_token in enumerate(range(0, n_tokens, size)):
        next_first = first_token + size
        end_char = spans[next_first][0] if next_first < n_tokens else end_of_text
        chunks.append(
            Chunk(
                id=f"{doc.id}:c{index:03d}",
                doc_id=doc.id,
                index=index,
                char_span=(start_char, end_char),
                token_count=min(next_first, n_tokens) - first_token,
            )
        )
        start_char = end_char
    return chunks


@dataclass
class Corpus:
    """Documents plus their chunks, as written to / read from the manifest file."""

    documents: list[Document]
    chunks: list[Chunk]
    chunk_tokens: int
    _docs_by_id: dict[str, Document] = field(init=False, repr=False)
    _chunks_by_id: dict[str, Chunk] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._docs_by_id = {d.id: d for d in self.documents}
        self._chunks_by_id = {c.id: c for c in self.chunks}
        if len(self._docs_by_id) != len(self.documents):
            raise ValueError("duplicate document ids in corpus")

    def document(self, doc_id: str) -> Document:
        return self._docs_by_id[doc_id]

    def chunk_by_id(self, chunk_id: str) -> Chunk:
        return self._chunks_by_id[chunk_id]

    def has_chunk(self, chunk_id: str) -> bool:
        return chunk_id in self._chunks_by_id

    def chunk_text(self, chunk_or_id: Chunk | str) -> str:
        ck = self.chunk_by_id(chunk_or_id) if isinstance(chunk_or_id, str) else chunk_or_id
        start, end = ck.char_span
        return self._docs_by_id[ck.doc_id].text[start:end]


def build_corpus(docs: list[Document], chunk_tokens: int) -> Corpus:
    all_chunks: list[Chunk] = []
    for doc in docs:
        all_chunks.extend(chunk(doc, chunk_tokens))
    return Corpus(documents=docs, chunks=all_chunks, chunk_tokens=chunk_tokens)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    payload = {
        "magic": CORPUS_MAGIC,
        "version": CORPUS_VERSION,
        "chunk_tokens": corpus.chunk_tokens,
        "documents": [
            {"id": d.id, "title": d.title, "text": d.text, "domain_name": d.domain_name}
            for d in corpus.documents
        ],
        "chunks": [
            {
                "id": c.id,
                "doc_id": c.doc_id,
                "index": c.index,
                "char_span": list(c.char_span),
                "token_count": c.token_count,
            }
            for c in corpus.chunks
        ],
    }
    Path(path).write_text(
        json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=None,
                   separators=(",", ":")),
        encoding="utf-8",
    )


def load_corpus(path: str | Path) -> Corpus:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("magic") != CORPUS_MAGIC:
        raise ValueError(f"{path}: not a corpus manifest")
    docs = [Document(**d) for d in payload["documents"]]
    chunks = [
        Chunk(
            id=c["id"],
            doc_id=c["doc_id"],
            index=c["index"],
            char_span=(c["char_span"][0], c["char_span"][1]),
            token_count=c["token_count"],
        )
        for c in payload["chunks"]
    ]
    return Corpus(documents=docs, chunks=chunks, chunk_tokens=payload["chunk_tokens"])
