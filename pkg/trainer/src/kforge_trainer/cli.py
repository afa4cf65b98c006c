"""CLI: `kforge-trainer train` and `kforge-trainer predict`."""

from __future__ import annotations

import argparse
import sys

from .predict import CheckpointError, predict
from .train import DatasetError, TrainConfig, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kforge-trainer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit low-rank adapters on a dataset JSONL")
    p.add_argument("--dataset", required=True)
    p.add_argument("--base-model", default="tiny")
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--max-steps", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--output-dir", default="checkpoint")
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("predict", help="generate predictions from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--max-new-tokens", type=int, default=48)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = TrainConfig(
                base_model_id=args.base_model,
                adapter_rank=args.rank,
                learning_rate=args.lr,
                max_steps=args.max_steps,
                batch_size=args.batch_size,
                output_dir=args.output_dir,
                max_seq_len=args.max_seq_len,
                seed=args.seed,
            )
            checkpoint = train(args.dataset, cfg)
            print(f"checkpoint -> {checkpoint}")
        else:
            output = predict(args.checkpoint, args.prompts, args.output,
                             max_new_tokens=args.max_new_tokens)
            print(f"predictions -> {output}")
    except (DatasetError, CheckpointError, ValueError, OSError) as exc:
        print(f"kforge-trainer: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
