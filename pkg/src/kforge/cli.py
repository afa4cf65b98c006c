"""Single executable for the whole pipeline.

Stages communicate through files under the output directory (conventional
names, overridable per flag), and every stage records its output hashes in
the manifest. Exit codes: 0 success, 1 usage, 2 stage failure, 3 upstream
service failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import builder, corpus as corpus_mod, evaluator, manifest, qa_forge, report, retriever
from .builder import DatasetConfig
from .errors import (
    KforgeError,
    ProtocolError,
    StageDependencyError,
    TransportError,
)
from .gateway import (
    ENV_JUDGE_MODEL,
    HttpBackend,
    LlmGateway,
    MockBackend,
    SamplingParams,
    TemplateStore,
)

logger = logging.getLogger("kforge.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_STAGE = 2
EXIT_UPSTREAM = 3

DEFAULT_OUT = "kforge_out"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract wants 1."""

    def error(self, message):  # noqa: D102
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"kforge: cannot read config {path}: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE) from exc


class Context:
    """Resolved run settings: flags > environment > config file > defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = _load_config(getattr(args, "config", None))
        self.seed = self._resolve("seed", cast=int, default=0)
        self.outdir = Path(self._resolve("out", config_key="output_dir", default=DEFAULT_OUT))
        self.jobs = self._resolve("jobs", cast=int, default=4)

    def _resolve(self, flag: str, config_key: str | None = None, env: str | None = None,
                 cast=None, default=None):
        value = getattr(self.args, flag.replace("-", "_"), None)
        if value is None and env:
            value = os.environ.get(env)
        if value is None:
            value = self.config.get(config_key or flag)
        if value is None:
            return default
        return cast(value) if cast else value

    def option(self, flag: str, default=None, cast=None):
        return self._resolve(flag, cast=cast, default=default)

    def sampling(self) -> SamplingParams:
        return SamplingParams(
            temperature=float(self.config.get("temperature", 0.7)),
            top_p=float(self.config.get("top_p", 0.95)),
            max_tokens=int(self.config.get("max_tokens", 1024)),
        )

    def gateway(self, role: str = "generator") -> LlmGateway:
        mock_dir = getattr(self.args, "mock_llm", None)
        templates = TemplateStore(getattr(self.args, "templates", None))
        if mock_dir is not None:
            backend = MockBackend(fixture_dir=mock_dir or None, seed=self.seed)
        else:
            model = None
            if role == "judge":
                model = os.environ.get(ENV_JUDGE_MODEL) or None
            backend = HttpBackend(model=model)
        return LlmGateway(backend, templates=templates, max_in_flight=self.jobs)

    def path(self, flag: str, default_name: str | tuple[str, ...],
             must_exist: bool = False, producer: str | None = None) -> Path:
        explicit = getattr(self.args, flag.replace("-", "_"), None)
        if explicit:
            path = Path(explicit)
        elif isinstance(default_name, tuple):
            candidates = [self.outdir / name for name in default_name]
            path = next((c for c in candidates if c.is_file()), candidates[0])
        else:
            path = self.outdir / default_name
        if must_exist and not path.is_file():
            hint = f" — run `kforge {producer}` first" if producer else ""
            raise StageDependencyError(f"missing input {path}{hint}")
        return path

    def record(self, stage: str, outputs: list[Path], params: dict) -> None:
        effective = {"seed": self.seed, "stage": stage, **params}
        manifest.record_stage(self.outdir, stage, outputs, effective, self.seed)


def _write_json(payload: dict, path: Path) -> None:
    path.write_text(
        json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


# ---------------------------------------------------------------- subcommands

def cmd_ingest(ctx: Context) -> int:
    chunk_tokens = ctx.option("chunk-tokens", cast=int) or int(
        ctx.config.get("chunk_tokens", 8000)
    )
    domain = ctx.option("domain-name") or ctx.config.get("domain_name", "domain")
    docs = [corpus_mod.ingest(path, domain) for path in ctx.args.inputs]
    corp = corpus_mod.build_corpus(docs, chunk_tokens)
    ctx.outdir.mkdir(parents=True, exist_ok=True)
    out = ctx.path("output", "corpus.json")
    corpus_mod.save_corpus(corp, out)
    ctx.record("ingest", [out], {"chunk_tokens": chunk_tokens, "domain_name": domain,
                                 "inputs": [str(p) for p in ctx.args.inputs]})
    print(f"ingested {len(docs)} document(s), {len(corp.chunks)} chunk(s) -> {out}")
    return EXIT_OK


def cmd_generate_qa(ctx: Context) -> int:
    corpus_path = ctx.path("corpus", "corpus.json", must_exist=True, producer="ingest")
    corp = corpus_mod.load_corpus(corpus_path)
    gateway = ctx.gateway()
    n_calls = ctx.option("n-calls", cast=int) or int(ctx.config.get("n_calls", 3))
    early = ctx.option("early-stop-coverage", cast=float)

    pairs: list[qa_forge.QAPair] = []
    for ck in corp.chunks:
        pairs.extend(
            qa_forge.generate_qa(
                ck,
                corp.chunk_text(ck),
                gateway,
                n_calls=n_calls,
                seed=ctx.seed,
                early_stop_coverage=early,
                sampling=ctx.sampling(),
            )
        )
    out = ctx.path("output", "qa_base.jsonl")
    qa_forge.save_pairs(pairs, out)
    ctx.record("generate-qa", [out], {"n_calls": n_calls, "early_stop_coverage": early})
    print(f"generated {len(pairs)} QA pair(s) -> {out}")
    return EXIT_OK


def cmd_augment_answers(ctx: Context) -> int:
    corpus_path = ctx.path("corpus", "corpus.json", must_exist=True, producer="ingest")
    qa_path = ctx.path("qa", "qa_base.jsonl", must_exist=True, producer="generate-qa")
    corp = corpus_mod.load_corpus(corpus_path)
    pairs = qa_forge.load_pairs(qa_path)
    gateway = ctx.gateway()
    max_paraphrases = ctx.option("max-paraphrases", cast=int) or int(
        ctx.config.get("max_paraphrases", 5)
    )
    augmented = [
        qa_forge.add_multiplicity(
            pair,
            corp.chunk_text(pair.source_chunk_id),
            gateway,
            max_paraphrases=max_paraphrases,
            seed=ctx.seed,
            sampling=ctx.sampling(),
        )
        for pair in pairs
    ]
    out = ctx.path("output", "qa_augmented.jsonl")
    qa_forge.save_pairs(augmented, out)
    mean_answers = sum(len(p.answers) for p in augmented) / max(len(augmented), 1)
    ctx.record("augment-answers", [out], {"max_paraphrases": max_paraphrases})
    print(f"augmented {len(augmented)} pair(s), {mean_answers:.2f} answers/question -> {out}")
    return EXIT_OK


def cmd_coverage(ctx: Context) -> int:
    corpus_path = ctx.path("corpus", "corpus.json", must_exist=True, producer="ingest")
    qa_path = ctx.path("qa", ("qa_augmented.jsonl", "qa_base.jsonl"),
                       must_exist=True, producer="generate-qa")
    corp = corpus_mod.load_corpus(corpus_path)
    pairs = qa_forge.load_pairs(qa_path)
    cov = qa_forge.coverage(corp, pairs)
    outputs = report.write_coverage_outputs(cov, ctx.outdir)
    ctx.record("coverage", outputs, {"qa_file": qa_path.name})
    print(f"overall coverage {cov.overall:.4f} -> {outputs[0]}")
    return EXIT_OK


def cmd_split(ctx: Context) -> int:
    qa_path = ctx.path("qa", ("qa_augmented.jsonl", "qa_base.jsonl"),
                       must_exist=True, producer="generate-qa")
    ratios = tuple(float(r) for r in ctx.option("ratios", default="0.8,0.1,0.1").split(","))
    if len(ratios) != 3:
        raise StageDependencyError("--ratios must have three comma-separated values")
    pairs = qa_forge.load_pairs(qa_path)
    labeled = qa_forge.split_pairs(pairs, ratios, seed=ctx.seed)
    out = ctx.path("output", "qa_split.jsonl")
    qa_forge.save_pairs(labeled, out)
    counts = {name: sum(1 for p in labeled if p.split == name) for name in ("train", "val", "test")}
    ctx.record("split", [out], {"ratios": list(ratios)})
    print(f"split {counts} -> {out}")
    return EXIT_OK


def cmd_filter_test(ctx: Context) -> int:
    qa_path = ctx.path("qa", "qa_split.jsonl", must_exist=True, producer="split")
    pairs = qa_forge.load_pairs(qa_path)
    test_pairs = [p for p in pairs if p.split == "test"]
    others = [p for p in pairs if p.split != "test"]
    kept, removed = qa_forge.filter_test(test_pairs, ctx.gateway())
    out = ctx.path("output", "qa_filtered.jsonl")
    removed_out = ctx.outdir / "removed_test.jsonl"
    qa_forge.save_pairs(others + kept, out)
    qa_forge.save_pairs(removed, removed_out)
    ctx.record("filter-test", [out, removed_out], {"qa_file": qa_path.name})
    print(f"kept {len(kept)}/{len(test_pairs)} test question(s) -> {out}")
    return EXIT_OK


def cmd_factoid(ctx: Context) -> int:
    qa_path = ctx.path("qa", ("qa_filtered.jsonl", "qa_split.jsonl", "qa_augmented.jsonl",
                              "qa_base.jsonl"), must_exist=True, producer="generate-qa")
    pairs = qa_forge.load_pairs(qa_path)
    subset = qa_forge.extract_factoid(pairs)
    out = ctx.path("output", "qa_factoid.jsonl")
    qa_forge.save_pairs(subset, out)
    ctx.record("factoid", [out], {"qa_file": qa_path.name})
    print(f"{len(subset)}/{len(pairs)} factoid pair(s) -> {out}")
    return EXIT_OK


def cmd_index_build(ctx: Context) -> int:
    corpus_path = ctx.path("corpus", "corpus.json", must_exist=True, producer="ingest")
    corp = corpus_mod.load_corpus(corpus_path)
    passage_tokens = ctx.option("passage-tokens", cast=int) or int(
        ctx.config.get("passage_tokens", retriever.DEFAULT_PASSAGE_TOKENS)
    )
    index = retriever.build_index(corp.documents, passage_tokens=passage_tokens)
    out = ctx.path("output", "index.json")
    ctx.outdir.mkdir(parents=True, exist_ok=True)
    index.save(out)
    ctx.record("index-build", [out], {"passage_tokens": passage_tokens})
    print(f"indexed {len(index)} passage(s) -> {out}")
    return EXIT_OK


def cmd_index_search(ctx: Context) -> int:
    index_path = ctx.path("index", "index.json", must_exist=True, producer="index build")
    index = retriever.load_index(index_path)
    results = index.search(ctx.args.query, k=ctx.args.k)
    for result in results:
        print(json.dumps({"rank": result.rank, "passage_id": result.passage_id,
                          "score": round(result.score, 6)}))
    return EXIT_OK


def _dataset_config(ctx: Context) -> DatasetConfig:
    chapter_buckets = None
    chapter_path = ctx.option("chapter-buckets") or ctx.config.get("chapter_buckets_file")
    if chapter_path:
        chapter_buckets = json.loads(Path(chapter_path).read_text(encoding="utf-8"))
    elif isinstance(ctx.config.get("chapter_buckets"), dict):
        chapter_buckets = ctx.config["chapter_buckets"]
    return DatasetConfig(
        strategy=(ctx.option("strategy") or ctx.config.get("strategy", "pa_rag")).lower(),
        corruption_p=float(ctx.option("corruption-p")
                           if ctx.option("corruption-p") is not None
                           else ctx.config.get("corruption_p", 0.4)),
        k_passages=ctx.option("k-passages", cast=int) or int(ctx.config.get("k_passages", 5)),
        max_paraphrases=int(ctx.config.get("max_paraphrases", 5)),
        chunk_tokens=int(ctx.config.get("chunk_tokens", 8000)),
        n_calls=int(ctx.config.get("n_calls", 3)),
        domain_identifier=ctx.option("identifier") or ctx.config.get("domain_identifier"),
        replay_ratio=float(ctx.option("replay-ratio")
                           if ctx.option("replay-ratio") is not None
                           else ctx.config.get("replay_ratio", 0.1)),
        assignment_policy=(ctx.option("assignment-policy")
                           or ctx.config.get("assignment_policy", "per_qa")),
        seed=ctx.seed,
        chapter_buckets=chapter_buckets,
    )


def cmd_build_dataset(ctx: Context) -> int:
    qa_path = ctx.path("qa", ("qa_filtered.jsonl", "qa_split.jsonl"),
                       must_exist=True, producer="split")
    corpus_path = ctx.path("corpus", "corpus.json", must_exist=True, producer="ingest")
    index_path = ctx.path("index", "index.json", must_exist=True, producer="index build")
    cfg = _dataset_config(ctx)
    corp = corpus_mod.load_corpus(corpus_path)
    index = retriever.load_index(index_path)
    pairs = [p for p in qa_forge.load_pairs(qa_path) if p.split == "train"]

    replay_items: list[builder.ReplayItem] = []
    replay_path = getattr(ctx.args, "replay", None)
    default_replay = ctx.outdir / "replay.jsonl"
    if replay_path:
        replay_items = builder.load_replay(replay_path)
    elif default_replay.is_file():
        replay_items = builder.load_replay(default_replay)

    examples = builder.build_dataset(pairs, cfg, index, corp, replay_items)
    rows = builder.dataset_rows(examples, TemplateStore(getattr(ctx.args, "templates", None)), cfg)
    out = ctx.path("output", "dataset.jsonl")
    builder.save_dataset(rows, out)
    ctx.record("build-dataset", [out], cfg.to_dict())
    n_replay = sum(1 for e in examples if e.origin == "replay")
    print(f"built {len(rows)} example(s) ({n_replay} replay) [{cfg.strategy}] -> {out}")
    return EXIT_OK


def cmd_build_replay(ctx: Context) -> int:
    inputs_path = ctx.path("inputs", "replay_inputs.jsonl", must_exist=True)
    inputs: list[tuple[str, str]] = []
    with inputs_path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                inputs.append((row["category"], row["input"]))
    items = builder.build_replay(inputs, ctx.gateway(role="target"))
    out = ctx.path("output", "replay.jsonl")
    ctx.outdir.mkdir(parents=True, exist_ok=True)
    builder.save_replay(items, out)
    ctx.record("build-replay", [out], {"inputs": inputs_path.name, "count": len(items)})
    print(f"built replay buffer with {len(items)} item(s) -> {out}")
    return EXIT_OK


def cmd_evaluate(ctx: Context) -> int:
    predictions_path = ctx.path("predictions", "predictions.jsonl", must_exist=True)
    qa_path = ctx.path("qa", ("qa_filtered.jsonl", "qa_split.jsonl"),
                       must_exist=True, producer="split")
    corpus_path = ctx.path("corpus", "corpus.json", must_exist=True, producer="ingest")
    index_path = ctx.path("index", "index.json", must_exist=True, producer="index build")

    predictions: dict[str, str] = {}
    with predictions_path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                predictions[row["question_id"]] = row["prediction"]

    pairs = qa_forge.load_pairs(qa_path)
    test_pairs = [p for p in pairs if p.split == "test"] or pairs
    corp = corpus_mod.load_corpus(corpus_path)
    index = retriever.load_index(index_path)
    judge_gateway = ctx.gateway(role="judge") if getattr(ctx.args, "judge", False) else None

    result = evaluator.evaluate_run(
        predictions, test_pairs, corp, index,
        k=ctx.option("k", cast=int, default=5),
        judge_gateway=judge_gateway,
    )
    outputs = report.write_eval_outputs(result, ctx.outdir)
    ctx.record("evaluate", outputs, {"k": ctx.option("k", cast=int, default=5),
                                     "judge": bool(judge_gateway)})
    print(
        f"evaluated {result.overall.get('count', 0)} record(s), "
        f"mean recall {result.overall.get('mean_token_recall', 0.0):.4f} -> {outputs[0]}"
    )
    return EXIT_OK


def cmd_regression(ctx: Context) -> int:
    scores_path = ctx.path("scores", "benchmark_scores.json", must_exist=True)
    reg = evaluator.regression_average(scores_path)
    outputs = report.write_regression_outputs(reg, ctx.outdir)
    ctx.record("regression", outputs, {"scores": scores_path.name})
    print(f"regression average {reg.average:.4f} -> {outputs[0]}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="run seed (default 0)")
    parser.add_argument("--out", help=f"output directory (default ./{DEFAULT_OUT})")
    parser.add_argument("--mock-llm", nargs="?", const="", metavar="FIXTURE_DIR",
                        help="use the offline mock backend (optional fixture directory)")
    parser.add_argument("--jobs", type=int, help="max concurrent LLM requests (default 4)")
    parser.add_argument("--templates", help="custom prompt template directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="kforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, **kwargs) -> argparse.ArgumentParser:
        p = sub.add_parser(name, **kwargs)
        _add_common(p)
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, help="ingest text/markdown files into a chunked corpus")
    p.add_argument("inputs", nargs="+", help="UTF-8 text/markdown files")
    p.add_argument("--domain-name", help="corpus domain label")
    p.add_argument("--chunk-tokens", type=int, help="max tokens before a document is split")
    p.add_argument("--output")

    p = add("generate-qa", cmd_generate_qa, help="generate QA pairs per chunk")
    p.add_argument("--corpus")
    p.add_argument("--n-calls", type=int, help="generation calls per chunk (default 3)")
    p.add_argument("--early-stop-coverage", type=float,
                   help="stop calling once chunk coverage reaches this fraction")
    p.add_argument("--output")

    p = add("augment-answers", cmd_augment_answers, help="add answer multiplicity")
    p.add_argument("--corpus")
    p.add_argument("--qa")
    p.add_argument("--max-paraphrases", type=int, help="answer cap per question (default 5)")
    p.add_argument("--output")

    p = add("coverage", cmd_coverage, help="token coverage of chunks by QA pairs")
    p.add_argument("--corpus")
    p.add_argument("--qa")

    p = add("split", cmd_split, help="assign train/val/test labels")
    p.add_argument("--qa")
    p.add_argument("--ratios", help="train,val,test fractions (default 0.8,0.1,0.1)")
    p.add_argument("--output")

    p = add("filter-test", cmd_filter_test, help="drop contextual test questions")
    p.add_argument("--qa")
    p.add_argument("--output")

    p = add("factoid", cmd_factoid, help="extract the short-answer subset")
    p.add_argument("--qa")
    p.add_argument("--output")

    p_index = sub.add_parser("index", help="passage index operations")
    index_sub = p_index.add_subparsers(dest="index_command", required=True)

    p = index_sub.add_parser("build", help="build the passage index")
    _add_common(p)
    p.set_defaults(func=cmd_index_build)
    p.add_argument("--corpus")
    p.add_argument("--passage-tokens", type=int, help="tokens per passage (default 512)")
    p.add_argument("--output")

    p = index_sub.add_parser("search", help="query the passage index")
    _add_common(p)
    p.set_defaults(func=cmd_index_search)
    p.add_argument("--index")
    p.add_argument("--query", required=True)
    p.add_argument("-k", type=int, default=5)

    p = add("build-dataset", cmd_build_dataset, help="assemble fine-tuning examples")
    p.add_argument("--qa")
    p.add_argument("--corpus")
    p.add_argument("--index")
    p.add_argument("--strategy", choices=builder.STRATEGIES)
    p.add_argument("--corruption-p", type=float,
                   help="probability a question sees only distractors")
    p.add_argument("--k-passages", type=int)
    p.add_argument("--identifier", help="domain identifier prefixed to questions")
    p.add_argument("--assignment-policy", choices=builder.POLICIES)
    p.add_argument("--chapter-buckets", help="JSON file mapping doc id -> success/failure")
    p.add_argument("--replay", help="replay buffer JSONL")
    p.add_argument("--replay-ratio", type=float)
    p.add_argument("--output")

    p = add("build-replay", cmd_build_replay, help="complete replay inputs with the target model")
    p.add_argument("--inputs", help="JSONL of {category, input}")
    p.add_argument("--output")

    p = add("evaluate", cmd_evaluate, help="score predictions against gold answers")
    p.add_argument("--predictions", help="JSONL of {question_id, prediction}")
    p.add_argument("--qa")
    p.add_argument("--corpus")
    p.add_argument("--index")
    p.add_argument("-k", type=int, help="retrieved passages per question (default 5)")
    p.add_argument("--judge", action="store_true", help="also run the LLM judge")

    p = add("regression", cmd_regression, help="aggregate external benchmark scores")
    p.add_argument("--scores", help="JSON file with the seven raw scores")

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("KF_LOG_LEVEL", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    ctx = Context(args)
    try:
        return args.func(ctx)
    except (TransportError, ProtocolError) as exc:
        print(f"kforge: upstream service failure: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except (KforgeError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"kforge: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
