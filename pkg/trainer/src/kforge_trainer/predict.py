"""Batch inference from an adapter checkpoint.

Reads prompt rows ({question_id, prompt}), greedily generates, and extracts
the first <response>...</response> span; when the span is absent the raw
generation is kept and the row is flagged.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import torch

from .model import ModelSpec, build_base_model, inject_adapters
from .train import ADAPTER_NAME, CONFIG_NAME, VOCAB_NAME
from .vocab import Vocab

_RESPONSE = re.compile(r"<response>\s*(.*?)\s*</response>", re.DOTALL)


class CheckpointError(FileNotFoundError):
    pass


def load_checkpoint(checkpoint_dir: str | Path):
    checkpoint_dir = Path(checkpoint_dir)
    config_path = checkpoint_dir / CONFIG_NAME
    if not config_path.is_file():
        raise CheckpointError(f"no checkpoint at {checkpoint_dir}")
    config = json.loads(config_path.read_text(encoding="utf-8"))
    vocab = Vocab.load(checkpoint_dir / VOCAB_NAME)
    spec = ModelSpec(**config["spec"])
    model = inject_adapters(build_base_model(spec), config["adapter_rank"])
    state = torch.load(checkpoint_dir / ADAPTER_NAME, weights_only=True)
    missing = model.load_state_dict(state, strict=False).missing_keys
    lora_missing = [key for key in missing if "lora_" in key]
    if lora_missing:
        raise CheckpointError(f"adapter weights incomplete: {lora_missing[:3]}")
    model.eval()
    return model, vocab


def extract_response(generation: str) -> tuple[str, bool]:
    match = _RESPONSE.search(generation)
    if match:
        return match.group(1), True
    return generation.strip(), False


def predict(
    checkpoint_dir: str | Path,
    prompts_file: str | Path,
    output_file: str | Path,
    max_new_tokens: int = 48,
) -> Path:
    model, vocab = load_checkpoint(checkpoint_dir)
    output_file = Path(output_file)
    n_rows = 0
    with Path(prompts_file).open("r", encoding="utf-8") as src, \
            output_file.open("w", encoding="utf-8") as dst:
        for line in src:
            if not line.strip():
                continue
            row = json.loads(line)
            window = max(model.spec.max_seq_len - max_new_tokens, 1)
            prompt_ids = vocab.encode(row["prompt"])[-window:]
            generated = model.generate(prompt_ids, max_new_tokens, eos_id=vocab.eos_id)
            text = vocab.decode(generated)
            prediction, found = extract_response(text)
            dst.write(
                json.dumps(
                    {
                        "question_id": row["question_id"],
                        "prediction": prediction,
                        "response_span_found": found,
                    },
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )
            n_rows += 1
    if n_rows == 0:
        raise ValueError(f"prompts file {prompts_file} is empty")
    return output_file
