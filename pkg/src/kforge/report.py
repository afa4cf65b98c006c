"""Report rendering: JSON detail, CSV summaries, and PNG figures side by side.

Every report-producing stage (coverage, evaluate, regression) goes through
here so the on-disk layout stays uniform: <name>.json with full detail,
<name>.csv with the flat summary, and one or two figures.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .evaluator import EvalReport, RegressionReport  # noqa: E402
from .qa_forge import CoverageReport  # noqa: E402

_FIG_DPI = 120


def _save_json(payload: dict, path: Path) -> None:
    path.write_text(
        json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def _save_fig(fig, path: Path) -> None:
    fig.savefig(path, dpi=_FIG_DPI, metadata={"Software": "kforge"})
    plt.close(fig)


def write_coverage_outputs(report: CoverageReport, outdir: str | Path) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    json_path = outdir / "coverage.json"
    csv_path = outdir / "coverage.csv"
    fig_path = outdir / "coverage_hist.png"

    _save_json(report.to_dict(), json_path)

    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chunk_id", "coverage"])
        for chunk_id in sorted(report.per_chunk):
            writer.writerow([chunk_id, f"{report.per_chunk[chunk_id]:.6f}"])

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(list(report.per_chunk.values()), bins=20, range=(0, 1), color="#4878d0")
    ax.axvline(report.overall, color="#d65f5f", linestyle="--",
               label=f"overall {report.overall:.3f}")
    ax.set_xlabel("per-chunk token coverage")
    ax.set_ylabel("chunks")
    ax.legend()
    fig.tight_layout()
    _save_fig(fig, fig_path)
    return [json_path, csv_path, fig_path]


def write_eval_outputs(report: EvalReport, outdir: str | Path) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    json_path = outdir / "eval_report.json"
    csv_path = outdir / "eval_records.csv"
    bars_path = outdir / "recall_by_stratum.png"
    hist_path = outdir / "recall_hist.png"

    _save_json(report.to_dict(), json_path)

    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["question_id", "overlap", "token_recall", "judge_score", "factoid"])
        for record in report.records:
            writer.writerow(
                [
                    record.question_id,
                    record.overlap,
                    f"{record.token_recall:.6f}",
                    "" if record.judge_score is None else record.judge_score,
                    int(record.factoid),
                ]
            )

    groups = [("overall", report.overall),
              ("no overlap", report.strata["no_overlap"]),
              ("some overlap", report.strata["some_overlap"]),
              ("factoid", report.factoid)]
    labels = [name for name, agg in groups if agg.get("count")]
    values = [agg["mean_token_recall"] for _, agg in groups if agg.get("count")]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, values, color="#4878d0")
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean token recall")
    for i, value in enumerate(values):
        ax.text(i, value + 0.02, f"{value:.3f}", ha="center", fontsize=9)
    fig.tight_layout()
    _save_fig(fig, bars_path)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist([r.token_recall for r in report.records], bins=20, range=(0, 1),
            color="#6acc64")
    ax.set_xlabel("token recall")
    ax.set_ylabel("records")
    fig.tight_layout()
    _save_fig(fig, hist_path)
    return [json_path, csv_path, bars_path, hist_path]


def write_regression_outputs(report: RegressionReport, outdir: str | Path) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    json_path = outdir / "regression.json"
    csv_path = outdir / "regression.csv"
    fig_path = outdir / "regression_scores.png"

    _save_json(report.to_dict(), json_path)

    components = report.components
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["component", "score"])
        for name, value in components.items():
            writer.writerow([name, f"{value:.6f}"])
        writer.writerow(["average", f"{report.average:.6f}"])

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(list(components), list(components.values()), color="#4878d0")
    ax.axhline(report.average, color="#d65f5f", linestyle="--",
               label=f"average {report.average:.2f}")
    ax.set_ylabel("score")
    ax.tick_params(axis="x", rotation=20)
    ax.legend()
    fig.tight_layout()
    _save_fig(fig, fig_path)
    return [json_path, csv_path, fig_path]
