"""Chat-completion gateway: prompt templates, backends, and output parsing.

One interface serves every LLM role in the pipeline (QA generation, answer
multiplicity, judging, test filtering, replay completion). Two backends:

* ``HttpBackend`` speaks the common chat-completion JSON protocol over HTTP,
  configured via KF_LLM_ENDPOINT / KF_LLM_API_KEY / KF_LLM_MODEL.
* ``MockBackend`` is fully offline and deterministic: it serves canned
  responses from a fixture directory keyed by template id + variables hash,
  falling back to a procedural generator that is a pure function of
  (template id, variables, seed). CI runs entirely on the mock.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import requests

from .corpus import metric_token_set
from .errors import LabelMissingError, ProtocolError, TemplateError, TransportError
from .seeding import digest_int

logger = logging.getLogger("kforge.gateway")

_PLACEHOLDER = re.compile(r"\{([a-z_][a-z0-9_]*)\}")
_DONE_SENTINEL = "</done>"

ENV_ENDPOINT = "KF_LLM_ENDPOINT"
ENV_API_KEY = "KF_LLM_API_KEY"
ENV_MODEL = "KF_LLM_MODEL"
ENV_JUDGE_MODEL = "KF_JUDGE_MODEL"


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_p: float = 0.95
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")


@dataclass(frozen=True)
class ChatRequest:
    template_id: str
    variables: dict[str, str]
    sampling: SamplingParams = SamplingParams()


@dataclass(frozen=True)
class TaggedSpan:
    tag: str
    body: str
    start: int = -1  # offset of the opening tag, for interleaving-order merges


@dataclass(frozen=True)
class ParseIssue:
    kind: str  # "unbalanced" | "orphan_open"
    fragment: str


@dataclass
class TagParse:
    spans: list[TaggedSpan]
    issues: list[ParseIssue] = field(default_factory=list)

    @property
    def bodies(self) -> list[str]:
        return [s.body for s in self.spans]


def parse_tagged(raw: str, tag: str) -> TagParse:
    """Extract well-formed, non-nested ``<tag>…</tag>`` spans in document order.

    Text after the first ``</done>`` sentinel is ignored. An opening tag that
    is followed by another opening tag loses its fragment; an opening tag with
    no closer before end-of-input is reported as unbalanced. Earlier spans are
    always returned.
    """
    text = raw.split(_DONE_SENTINEL, 1)[0]
    open_tok, close_tok = f"<{tag}>", f"</{tag}>"
    events: list[tuple[int, str]] = [
        (m.start(), "open") for m in re.finditer(re.escape(open_tok), text)
    ] + [(m.start(), "close") for m in re.finditer(re.escape(close_tok), text)]
    events.sort()

    spans: list[TaggedSpan] = []
    issues: list[ParseIssue] = []
    open_pos: int | None = None
    body_start: int | None = None
    for pos, kind in events:
        if kind == "open":
            if body_start is not None:
                issues.append(ParseIssue("orphan_open", text[body_start:pos]))
            open_pos = pos
            body_start = pos + len(open_tok)
        else:
            if body_start is not None:
                spans.append(TaggedSpan(tag=tag, body=text[body_start:pos], start=open_pos))
                body_start = None
            # stray closer: ignore
    if body_start is not None:
        issues.append(ParseIssue("unbalanced", text[body_start:]))
    if issues:
        logger.warning(
            "parse_tagged tag=%s dropped %d malformed fragment(s)", tag, len(issues)
        )
    return TagParse(spans=spans, issues=issues)


def parse_labeled_line(raw: str, label: str) -> str:
    """Value after the first line that starts with ``label:`` (case-insensitive)."""
    prefix = label.lower() + ":"
    for line in raw.splitlines():
        stripped = line.strip()
        if stripped.lower().startswith(prefix):
            return stripped[len(prefix):].strip()
    raise LabelMissingError(f"no line labeled {label!r} in completion")


class TemplateStore:
    """Loads `{placeholder}` prompt templates from a directory (default: packaged)."""

    def __init__(self, directory: str | Path | None = None):
        self._directory = Path(directory) if directory is not None else None
        self._cache: dict[str, str] = {}

    def text(self, template_id: str) -> str:
        if template_id not in self._cache:
            if self._directory is not None:
                path = self._directory / f"{template_id}.txt"
                if not path.is_file():
                    raise TemplateError(f"unknown template: {template_id!r} ({path})")
                self._cache[template_id] = path.read_text(encoding="utf-8")
            else:
                ref = resources.files("kforge") / "templates" / f"{template_id}.txt"
                if not ref.is_file():
                    raise TemplateError(f"unknown template: {template_id!r}")
                self._cache[template_id] = ref.read_text(encoding="utf-8")
        return self._cache[template_id]

    def placeholders(self, template_id: str) -> set[str]:
        return set(_PLACEHOLDER.findall(self.text(template_id)))

    def render(self, template_id: str, variables: dict[str, str]) -> str:
        return self.render_text(self.text(template_id), variables, name=template_id)

    @staticmethod
    def render_text(text: str, variables: dict[str, str], name: str = "<inline>") -> str:
        """Single-pass substitution; inserted values are never re-scanned."""
        missing = set(_PLACEHOLDER.findall(text)) - set(variables)
        if missing:
            raise TemplateError(
                f"template {name!r}: unbound placeholder(s) {sorted(missing)}"
            )
        return _PLACEHOLDER.sub(lambda m: str(variables[m.group(1)]), text)


def variables_key(template_id: str, variables: dict[str, str]) -> str:
    """Fixture file stem for a request: template id + hash of its variables."""
    blob = json.dumps(variables, sort_keys=True, ensure_ascii=False)
    return f"{template_id}-{hashlib.sha256(blob.encode('utf-8')).hexdigest()[:16]}"


def _segments(text: str) -> list[str]:
    parts = re.split(r"(?<=[.!?])\s+|\n+", text)
    return [p.strip() for p in parts if p.strip()]


class MockBackend:
    """Offline deterministic backend.

    Looks up ``<fixture_dir>/<template_id>-<vars_hash>.txt`` first; otherwise
    synthesizes a plausible tag-structured completion as a pure function of
    (template id, variables, request seed, backend seed).
    """

    def __init__(self, fixture_dir: str | Path | None = None, seed: int = 0):
        self.fixture_dir = Path(fixture_dir) if fixture_dir else None
        self.seed = seed

    def complete(
        self,
        prompt: str,
        sampling: SamplingParams,
        template_id: str,
        variables: dict[str, str],
    ) -> str:
        if self.fixture_dir is not None:
            path = self.fixture_dir / f"{variables_key(template_id, variables)}.txt"
            if path.is_file():
                return path.read_text(encoding="utf-8")
        return self._synthesize(prompt, sampling, template_id, variables)

    def _synthesize(
        self,
        prompt: str,
        sampling: SamplingParams,
        template_id: str,
        variables: dict[str, str],
    ) -> str:
        rng = random.Random(digest_int(self.seed, sampling.seed, prompt))
        if template_id == "qa_generation":
            return self._qa_pairs(variables.get("document", ""), rng)
        if template_id == "answer_multiplicity":
            return self._multi_answers(
                variables.get("document", ""), variables.get("question", ""), rng
            )
        if template_id == "judge":
            return self._judge(
                variables.get("gold_response", ""), variables.get("predicted_response", "")
            )
        if template_id == "test_filter":
            return self._filter_verdict(variables.get("question", ""))
        if template_id == "replay":
            return variables.get("input", "")
        return f"<response>mock completion {rng.randrange(10**6)}</response>"

    @staticmethod
    def _qa_pairs(document: str, rng: random.Random) -> str:
        segs = _segments(document)
        if not segs:
            return _DONE_SENTINEL
        order = list(range(len(segs)))
        rng.shuffle(order)
        count = min(len(segs), 3 + rng.randrange(3))
        out = []
        for i in order[:count]:
            topic = " ".join(segs[i].split()[:4])
            out.append(f"<question>What is stated about {topic}?</question>")
            out.append(f"<answer>{segs[i]}</answer>")
        out.append(_DONE_SENTINEL)
        return "\n".join(out)

    @staticmethod
    def _multi_answers(document: str, question: str, rng: random.Random) -> str:
        segs = _segments(document) or [document.strip() or "n/a"]
        order = list(range(len(segs)))
        rng.shuffle(order)
        count = min(len(segs), 2 + rng.randrange(4))
        styles = ["{}", "In short: {}", "- {}", "Put differently, {}"]
        out = []
        for slot, i in enumerate(order[:count]):
            out.append(f"<answer>{styles[slot % len(styles)].format(segs[i])}</answer>")
        out.append(_DONE_SENTINEL)
        return "\n".join(out)

    @staticmethod
    def _judge(gold: str, prediction: str) -> str:
        gold_tokens = metric_token_set(gold)
        pred_tokens = metric_token_set(prediction)
        score = 1 if gold_tokens and gold_tokens <= pred_tokens else 0
        verdict = "covers" if score else "misses part of"
        return (
            f"<explanation>The prediction {verdict} the ground-truth content."
            f"</explanation><score>{score}</score>"
        )

    _CONTEXTUAL_MARKERS = (
        "based on given example",
        "mentioned in the chapter",
        "mentioned in the passage",
        "given in the document",
        "in the above passage",
        "in the given context",
    )

    @classmethod
    def _filter_verdict(cls, question: str) -> str:
        lowered = question.lower()
        incomplete = any(marker in lowered for marker in cls._CONTEXTUAL_MARKERS)
        verdict = "Incomplete" if incomplete else "Complete"
        reason = (
            "The question leans on surrounding material."
            if incomplete
            else "The question is self-contained."
        )
        return f"Feedback:::\nEvaluation: {reason}\nScoring: {verdict}"


class HttpBackend:
    """Chat-completion endpoint client with bounded retries and backoff."""

    RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint or os.environ.get(ENV_ENDPOINT) or ""
        if not self.endpoint:
            raise TransportError(
                f"no chat endpoint configured (set {ENV_ENDPOINT} or use the mock backend)"
            )
        if not self.endpoint.rstrip("/").endswith("/chat/completions"):
            self.endpoint = self.endpoint.rstrip("/") + "/chat/completions"
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY, "")
        self.model = model or os.environ.get(ENV_MODEL, "")
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()

    def complete(
        self,
        prompt: str,
        sampling: SamplingParams,
        template_id: str,
        variables: dict[str, str],
    ) -> str:
        payload: dict[str, object] = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "max_tokens": sampling.max_tokens,
        }
        if sampling.seed is not None:
            payload["seed"] = sampling.seed

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                response = self.session.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                logger.warning(
                    "transport failure (attempt %d/%d): %s", attempt + 1, self.retries + 1, exc
                )
                continue
            if response.status_code in self.RETRYABLE_STATUS:
                last_error = ProtocolError(f"status {response.status_code}")
                logger.warning(
                    "retryable status %d (attempt %d/%d)",
                    response.status_code, attempt + 1, self.retries + 1,
                )
                continue
            if not 200 <= response.status_code < 300:
                raise ProtocolError(
                    f"chat endpoint returned status {response.status_code}: "
                    f"{response.text[:200]}"
                )
            try:
                return response.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise ProtocolError(f"malformed chat completion body: {exc}") from exc
        raise TransportError(
            f"chat endpoint unreachable after {self.retries} retries: {last_error}"
        )


class LlmGateway:
    """Template rendering plus a synchronous batch contract over a backend."""

    def __init__(self, backend, templates: TemplateStore | None = None, max_in_flight: int = 4):
        self.backend = backend
        self.templates = templates or TemplateStore()
        self.max_in_flight = max(1, max_in_flight)

    def render(self, req: ChatRequest) -> str:
        return self.templates.render(req.template_id, req.variables)

    def complete(self, req: ChatRequest) -> str:
        prompt = self.render(req)
        return self.backend.complete(prompt, req.sampling, req.template_id, req.variables)

    def complete_batch(self, requests_: list[ChatRequest]) -> list[str]:
        """Results keyed by request index regardless of completion order."""
        if not requests_:
            return []
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(self.complete, requests_))

    def complete_tagged(self, req: ChatRequest, tag: str) -> TagParse:
        """Complete and parse; re-prompt once (bumped seed) if nothing was salvaged."""
        parse = parse_tagged(self.complete(req), tag)
        if not parse.spans:
            logger.warning(
                "no <%s> spans salvaged for template %s; re-prompting once",
                tag, req.template_id,
            )
            bumped = replace(
                req.sampling, seed=(req.sampling.seed or 0) + 1_000_003
            )
            parse = parse_tagged(self.complete(replace(req, sampling=bumped)), tag)
        return parse
