import random

import pytest

from kforge.corpus import Chunk, Document, token_spans
from kforge.errors import EmptyCorpusError, IndexNotBuiltError
from kforge.retriever import (
    Passage,
    build_index,
    load_index,
    overlap_class,
    passage_overlaps_chunk,
)

from conftest import make_word_doc


def _doc(doc_id: str, n_tokens: int, seed: int) -> Document:
    rng = random.Random(seed)
    return make_word_doc(doc_id, n_tokens, rng)


class TestBuildIndex:
    def test_1024_tokens_make_two_passages(self):
        text = " ".join(f"t{i}" for i in range(1024))
        doc = Document(id="d", title="t", text=text, domain_name="x")
        index = build_index([doc], passage_tokens=512)
        assert len(index) == 2
        assert [p.token_count for p in index.passages] == [512, 512]

    def test_passages_tile_documents(self):
        docs = [_doc(f"d{i}", 300 + 37 * i, seed=i) for i in range(3)]
        index = build_index(docs, passage_tokens=64)
        for doc in docs:
            own = [p for p in index.passages if p.doc_id == doc.id]
            assert "".join(p.text for p in own) == doc.text
            assert sum(p.token_count for p in own) == len(token_spans(doc.text))
            assert all(p.token_count <= 64 for p in own)

    def test_rebuild_is_byte_identical(self, tmp_path):
        docs = [_doc("d0", 500, seed=1), _doc("d1", 700, seed=2)]
        path_a, path_b = tmp_path / "a.json", tmp_path / "b.json"
        build_index(docs, passage_tokens=64).save(path_a)
        build_index(docs, passage_tokens=64).save(path_b)
        assert path_a.read_bytes() == path_b.read_bytes()

    def test_empty_corpus_rejected(self):
        with pytest.raises(EmptyCorpusError):
            build_index([])

    def test_round_trip_preserves_search(self, tmp_path):
        docs = [_doc(f"d{i}", 400, seed=i) for i in range(3)]
        index = build_index(docs, passage_tokens=64)
        path = tmp_path / "index.json"
        index.save(path)
        loaded = load_index(path)
        query = index.passages[3].text
        assert loaded.search(query, k=5) == index.search(query, k=5)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(IndexNotBuiltError):
            load_index(tmp_path / "absent.json")


class TestSearch:
    @pytest.fixture
    def index(self):
        docs = [_doc(f"d{i}", 600, seed=100 + i) for i in range(4)]
        return build_index(docs, passage_tokens=64)

    def test_self_retrieval_rank_one(self, index):
        for passage in index.passages[:10]:
            results = index.search(passage.text, k=3)
            assert results[0].passage_id == passage.id
            assert results[0].rank == 1

    def test_no_vocabulary_overlap_empty(self, index):
        assert index.search("zzz yyy xxx entirely foreign", k=5) == []

    def test_k_larger_than_corpus(self, index):
        results = index.search(index.passages[0].text, k=10_000)
        assert 0 < len(results) <= len(index)
        assert [r.rank for r in results] == list(range(1, len(results) + 1))

    def test_scores_non_increasing(self, index):
        results = index.search(index.passages[0].text, k=20)
        scores = [r.score for r in results]
        assert scores == sorted(scores, reverse=True)

    def test_deterministic_including_ties(self):
        # two identical documents -> tied scores broken by passage id
        text = "alpha beta gamma delta"
        docs = [Document(id="da", title="t", text=text, domain_name="x"),
                Document(id="db", title="t", text=text, domain_name="x")]
        index = build_index(docs, passage_tokens=16)
        first = index.search("alpha beta", k=2)
        assert [r.passage_id for r in first] == ["da:p0000", "db:p0000"]
        assert first == index.search("alpha beta", k=2)
        assert first[0].score == first[1].score

    def test_k_precondition(self, index):
        with pytest.raises(ValueError):
            index.search("q", k=0)


class TestOverlapClass:
    def _chunk(self, doc_id, span):
        return Chunk(id=f"{doc_id}:gold", doc_id=doc_id, index=0,
                     char_span=span, token_count=1)

    def test_retrieved_inside_gold_span(self):
        doc = _doc("d0", 300, seed=5)
        index = build_index([doc], passage_tokens=64)
        passage = index.passages[1]
        gold = self._chunk("d0", (passage.char_span[0] - 3, passage.char_span[1] + 3))
        results = index.search(passage.text, k=3)
        assert overlap_class(results, gold, index) == "some_overlap"

    def test_other_documents_only(self):
        docs = [_doc("d0", 300, seed=6), _doc("d1", 300, seed=7)]
        index = build_index(docs, passage_tokens=64)
        gold = self._chunk("d1", (0, 50))
        results = [r for r in index.search(index.passages[0].text, k=20)
                   if index.passage(r.passage_id).doc_id == "d0"]
        assert overlap_class(results, gold, index) == "no_overlap"

    def test_same_doc_disjoint_span(self):
        # oracle: explicit half-open interval intersection on constructed spans
        def intersects(a, b):
            return a[0] < b[1] and b[0] < a[1]

        doc = _doc("d0", 600, seed=8)
        index = build_index([doc], passage_tokens=64)
        last = index.passages[-1]
        gold = self._chunk("d0", (0, index.passages[0].char_span[1]))
        assert not intersects(last.char_span, gold.char_span)
        results = index.search(last.text, k=1)
        assert results[0].passage_id == last.id
        assert overlap_class(results, gold, index) == "no_overlap"

    def test_boundary_touching_spans_do_not_intersect(self):
        passage = Passage(id="p", doc_id="d", char_span=(10, 20), token_count=2, text="x y")
        assert not passage_overlaps_chunk(passage, self._chunk("d", (20, 30)))
        assert passage_overlaps_chunk(passage, self._chunk("d", (19, 30)))
        assert not passage_overlaps_chunk(passage, self._chunk("other", (10, 20)))

    def test_empty_results(self):
        doc = _doc("d0", 100, seed=9)
        index = build_index([doc], passage_tokens=64)
        assert overlap_class([], self._chunk("d0", (0, 10)), index) == "no_overlap"
