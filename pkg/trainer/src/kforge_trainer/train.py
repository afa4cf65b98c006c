"""Adapter fine-tuning over a kforge dataset JSONL.

Rows are {example_id, prompt, completion, meta}; the loss covers only the
completion tokens (prompt positions are masked out). The checkpoint directory
holds the adapter weights, vocabulary, spec, and a per-step loss log.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch.nn import functional as F

from .model import (
    ModelSpec,
    adapter_state,
    build_base_model,
    inject_adapters,
    trainable_parameters,
)
from .vocab import Vocab

ALLOWED_RANKS = (8, 16, 32, 64, 128, 256)

CONFIG_NAME = "config.json"
VOCAB_NAME = "vocab.json"
ADAPTER_NAME = "adapter.pt"
LOSS_LOG_NAME = "loss_log.jsonl"


@dataclass
class TrainConfig:
    base_model_id: str = "tiny"
    adapter_rank: int = 16
    learning_rate: float = 1e-4
    max_steps: int = 2
    batch_size: int = 4
    output_dir: str = "checkpoint"
    max_seq_len: int | None = None  # cap below the preset's limit if set
    seed: int = 0

    def __post_init__(self) -> None:
        if self.adapter_rank not in ALLOWED_RANKS:
            raise ValueError(
                f"adapter_rank must be one of {ALLOWED_RANKS}, got {self.adapter_rank}"
            )
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class DatasetError(ValueError):
    pass


def load_rows(dataset_path: str | Path) -> list[dict]:
    rows = []
    with Path(dataset_path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"row {line_no}: invalid JSON ({exc})") from exc
            if not isinstance(row, dict) or "prompt" not in row or "completion" not in row:
                raise DatasetError(f"row {line_no}: expected prompt/completion fields")
            rows.append(row)
    return rows


def _encode_row(row: dict, vocab: Vocab, max_seq_len: int) -> tuple[list[int], list[int]]:
    """(input_ids, labels) with prompt positions masked to -100.

    Sequences longer than the window keep their tail so the completion
    always survives truncation.
    """
    prompt_ids = vocab.encode(row["prompt"])
    completion_ids = vocab.encode(row["completion"]) + [vocab.eos_id]
    input_ids = prompt_ids + completion_ids
    labels = [-100] * len(prompt_ids) + completion_ids
    if len(input_ids) > max_seq_len:
        input_ids = input_ids[-max_seq_len:]
        labels = labels[-max_seq_len:]
    return input_ids, labels


def _batchify(encoded, batch_size, pad_id):
    for start in range(0, len(encoded), batch_size):
        batch = encoded[start:start + batch_size]
        width = max(len(ids) for ids, _ in batch)
        inputs = torch.full((len(batch), width), pad_id, dtype=torch.long)
        labels = torch.full((len(batch), width), -100, dtype=torch.long)
        for i, (ids, labs) in enumerate(batch):
            inputs[i, : len(ids)] = torch.tensor(ids)
            labels[i, : len(labs)] = torch.tensor(labs)
        yield inputs, labels


def train(dataset_path: str | Path, cfg: TrainConfig) -> Path:
    """Fit the adapters and return the checkpoint directory."""
    rows = load_rows(dataset_path)
    if not rows:
        raise DatasetError(f"dataset {dataset_path} is empty")

    torch.manual_seed(cfg.seed)
    vocab = Vocab.build([row["prompt"] + " " + row["completion"] for row in rows])
    spec = ModelSpec.from_preset(cfg.base_model_id, vocab_size=len(vocab))
    if cfg.max_seq_len:
        spec.max_seq_len = min(spec.max_seq_len, cfg.max_seq_len)
    model = inject_adapters(build_base_model(spec), cfg.adapter_rank)

    encoded = [_encode_row(row, vocab, spec.max_seq_len) for row in rows]
    optimizer = torch.optim.AdamW(trainable_parameters(model), lr=cfg.learning_rate)

    output_dir = Path(cfg.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    loss_log = output_dir / LOSS_LOG_NAME

    model.train()
    step = 0
    order = torch.randperm(len(encoded)).tolist()
    with loss_log.open("w", encoding="utf-8") as log:
        while step < cfg.max_steps:
            for inputs, labels in _batchify([encoded[i] for i in order],
                                            cfg.batch_size, vocab.pad_id):
                logits = model(inputs)
                loss = F.cross_entropy(
                    logits[:, :-1].reshape(-1, logits.shape[-1]),
                    labels[:, 1:].reshape(-1),
                    ignore_index=-100,
                )
                if not math.isfinite(loss.item()):
                    raise RuntimeError(f"non-finite loss at step {step}: {loss.item()}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                log.write(json.dumps({"step": step, "loss": loss.item()}) + "\n")
                step += 1
                if step >= cfg.max_steps:
                    break

    torch.save(adapter_state(model), output_dir / ADAPTER_NAME)
    vocab.save(output_dir / VOCAB_NAME)
    (output_dir / CONFIG_NAME).write_text(
        json.dumps(
            {
                "spec": spec.to_dict(),
                "adapter_rank": cfg.adapter_rank,
                "learning_rate": cfg.learning_rate,
                "max_steps": cfg.max_steps,
                "batch_size": cfg.batch_size,
                "seed": cfg.seed,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    return output_dir
