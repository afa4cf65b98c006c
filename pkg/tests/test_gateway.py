import threading
import time

import pytest
import requests
from hypothesis import given, settings
from hypothesis import strategies as st

from kforge.errors import LabelMissingError, ProtocolError, TemplateError, TransportError
from kforge.gateway import (
    ChatRequest,
    HttpBackend,
    LlmGateway,
    MockBackend,
    SamplingParams,
    TemplateStore,
    parse_labeled_line,
    parse_tagged,
    variables_key,
)


class TestParseTagged:
    def test_done_sentinel_cuts_trailing_text(self):
        parse = parse_tagged("<answer>A</answer><answer>B</answer></done>garbage", "answer")
        assert parse.bodies == ["A", "B"]
        assert not parse.issues

    def test_selects_requested_tag_only(self):
        raw = "<question>Q1</question><answer>A1</answer>"
        assert parse_tagged(raw, "question").bodies == ["Q1"]
        assert parse_tagged(raw, "answer").bodies == ["A1"]

    def test_unbalanced_open_reported(self):
        parse = parse_tagged("<answer>A", "answer")
        assert parse.bodies == []
        assert [i.kind for i in parse.issues] == ["unbalanced"]
        assert parse.issues[0].fragment == "A"

    def test_earlier_spans_survive_dangling_tail(self):
        parse = parse_tagged("<answer>ok</answer><answer>tail", "answer")
        assert parse.bodies == ["ok"]
        assert parse.issues[0].kind == "unbalanced"

    def test_double_open_drops_first_fragment(self):
        parse = parse_tagged("<answer>lost<answer>kept</answer>", "answer")
        assert parse.bodies == ["kept"]
        assert parse.issues[0].kind == "orphan_open"

    def test_stray_closer_ignored(self):
        assert parse_tagged("</answer><answer>x</answer>", "answer").bodies == ["x"]

    @given(st.lists(st.text(max_size=30).filter(
        lambda s: "<t>" not in s and "</t>" not in s and "</done>" not in s),
        max_size=8))
    @settings(max_examples=120)
    def test_left_inverse_of_wrapping(self, bodies):
        raw = "".join(f"<t>{b}</t>" for b in bodies)
        parse = parse_tagged(raw, "t")
        assert parse.bodies == bodies
        assert not parse.issues


class TestParseLabeledLine:
    def test_table_style_verdict(self):
        assert parse_labeled_line("Evaluation: ok\nScoring: Complete", "Scoring") == "Complete"

    def test_missing_label(self):
        with pytest.raises(LabelMissingError):
            parse_labeled_line("Evaluation: ok", "Scoring")

    def test_case_and_whitespace_insensitive(self):
        assert parse_labeled_line("scoring:  Incomplete ", "Scoring") == "Incomplete"

    def test_first_match_wins(self):
        raw = "Scoring: Complete\nScoring: Incomplete"
        assert parse_labeled_line(raw, "Scoring") == "Complete"


class TestTemplates:
    def test_all_shipped_templates_load(self):
        store = TemplateStore()
        expected = {
            "qa_generation": {"document"},
            "answer_multiplicity": {"document", "question"},
            "finetune_context": {"document_0", "document_1", "document_2", "document_3",
                                 "document_4", "data_identifier", "question"},
            "finetune_no_context": {"question"},
            "judge": {"question", "gold_response", "predicted_response"},
            "test_filter": {"question"},
            "replay": {"input"},
        }
        for template_id, placeholders in expected.items():
            assert store.placeholders(template_id) == placeholders

    def test_render_binds_placeholders(self):
        store = TemplateStore()
        text = store.render("finetune_no_context", {"question": "What is X?"})
        assert "User: What is X?" in text
        assert "{question}" not in text

    def test_unbound_placeholder_raises(self):
        store = TemplateStore()
        with pytest.raises(TemplateError, match="question"):
            store.render("judge", {"gold_response": "g", "predicted_response": "p"})

    def test_unknown_template_raises(self):
        with pytest.raises(TemplateError):
            TemplateStore().text("nonexistent")

    def test_braces_in_values_stay_literal(self):
        rendered = TemplateStore.render_text("q: {question}", {"question": "{weird} text"})
        assert rendered == "q: {weird} text"

    def test_custom_directory(self, tmp_path):
        (tmp_path / "custom.txt").write_text("hello {name}", encoding="utf-8")
        store = TemplateStore(tmp_path)
        assert store.render("custom", {"name": "world"}) == "hello world"

    def test_passage_slots_in_context_template(self):
        text = TemplateStore().text("finetune_context")
        for i in range(5):
            assert f"<passage_{i}>" in text
        assert "<response>" in text and "</response>" in text


class TestMockBackend:
    def test_same_request_twice_is_byte_identical(self):
        gw = LlmGateway(MockBackend(seed=3))
        req = ChatRequest("qa_generation", {"document": "One fact. Two facts. Three facts."},
                          SamplingParams(seed=5))
        assert gw.complete(req) == gw.complete(req)

    def test_seed_changes_output(self):
        gw = LlmGateway(MockBackend(seed=3))
        base = {"document": "One fact. Two facts. Three facts. Four facts. Five facts."}
        a = gw.complete(ChatRequest("qa_generation", base, SamplingParams(seed=1)))
        b = gw.complete(ChatRequest("qa_generation", base, SamplingParams(seed=2)))
        assert a != b

    def test_fixture_file_overrides_procedural(self, tmp_path):
        variables = {"document": "doc text"}
        key = variables_key("qa_generation", variables)
        (tmp_path / f"{key}.txt").write_text("<question>Q</question><answer>A</answer>",
                                             encoding="utf-8")
        gw = LlmGateway(MockBackend(fixture_dir=tmp_path, seed=0))
        raw = gw.complete(ChatRequest("qa_generation", variables))
        assert raw == "<question>Q</question><answer>A</answer>"

    def test_replay_template_echoes_input(self):
        gw = LlmGateway(MockBackend(seed=0))
        assert gw.complete(ChatRequest("replay", {"input": "say this back"})) == "say this back"

    def test_filter_verdict_follows_contextual_markers(self):
        gw = LlmGateway(MockBackend(seed=0))
        raw = gw.complete(ChatRequest(
            "test_filter", {"question": "What is X based on given example?"}))
        assert parse_labeled_line(raw, "Scoring") == "Incomplete"
        raw = gw.complete(ChatRequest("test_filter", {"question": "What is X?"}))
        assert parse_labeled_line(raw, "Scoring") == "Complete"

    def test_unbound_placeholder_propagates(self):
        gw = LlmGateway(MockBackend(seed=0))
        with pytest.raises(TemplateError):
            gw.complete(ChatRequest("judge", {"question": "q"}))


class _FakeResponse:
    def __init__(self, status_code=200, content="ok"):
        self.status_code = status_code
        self.text = content
        self._content = content

    def json(self):
        return {"choices": [{"message": {"content": self._content}}]}


class _FakeSession:
    """Scripted session: each entry is an Exception or a _FakeResponse."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = 0

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls += 1
        action = self.script.pop(0) if self.script else self.script_default()
        if isinstance(action, Exception):
            raise action
        return action

    @staticmethod
    def script_default():
        return _FakeResponse()


class TestHttpBackend:
    def _backend(self, session):
        return HttpBackend(endpoint="http://llm.test/v1", model="m",
                           retries=3, backoff=0.0, session=session)

    def test_transport_error_after_retries(self):
        session = _FakeSession([requests.ConnectionError("refused")] * 4)
        backend = self._backend(session)
        with pytest.raises(TransportError):
            backend.complete("p", SamplingParams(), "t", {})
        assert session.calls == 4  # initial attempt + 3 retries

    def test_recovers_from_transient_failure(self):
        session = _FakeSession([requests.ConnectionError("blip"), _FakeResponse(content="fine")])
        assert self._backend(session).complete("p", SamplingParams(), "t", {}) == "fine"
        assert session.calls == 2

    def test_retryable_status_then_success(self):
        session = _FakeSession([_FakeResponse(status_code=503), _FakeResponse(content="late")])
        assert self._backend(session).complete("p", SamplingParams(), "t", {}) == "late"

    def test_client_error_is_protocol_error(self):
        session = _FakeSession([_FakeResponse(status_code=404)])
        with pytest.raises(ProtocolError):
            self._backend(session).complete("p", SamplingParams(), "t", {})
        assert session.calls == 1

    def test_malformed_body_is_protocol_error(self):
        class Bad(_FakeResponse):
            def json(self):
                return {"unexpected": []}

        session = _FakeSession([Bad()])
        with pytest.raises(ProtocolError):
            self._backend(session).complete("p", SamplingParams(), "t", {})

    def test_endpoint_required(self, monkeypatch):
        monkeypatch.delenv("KF_LLM_ENDPOINT", raising=False)
        with pytest.raises(TransportError):
            HttpBackend()

    def test_chat_completions_suffix_appended(self):
        backend = HttpBackend(endpoint="http://llm.test/v1", session=_FakeSession([]))
        assert backend.endpoint.endswith("/v1/chat/completions")


class _SlowBackend:
    """Later requests finish first; exposes completion order."""

    def __init__(self):
        self.finished: list[str] = []
        self._lock = threading.Lock()

    def complete(self, prompt, sampling, template_id, variables):
        index = int(variables["input"])
        time.sleep((5 - index) * 0.01)
        with self._lock:
            self.finished.append(variables["input"])
        return f"result-{index}"


class TestBatchContract:
    def test_results_keyed_by_request_index(self):
        backend = _SlowBackend()
        gw = LlmGateway(backend, max_in_flight=6)
        reqs = [ChatRequest("replay", {"input": str(i)}) for i in range(6)]
        results = gw.complete_batch(reqs)
        assert results == [f"result-{i}" for i in range(6)]
        assert backend.finished != [str(i) for i in range(6)]  # completion order differed

    def test_empty_batch(self, mock_gateway):
        assert mock_gateway.complete_batch([]) == []
