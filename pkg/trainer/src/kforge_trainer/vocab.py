"""Word-level vocabulary for the toy causal LM.

Markup tokens like ``<response>`` and ``</passage_3>`` are split out as their
own units even when glued to adjacent text, so span extraction works on
generated token streams. Decoding joins tokens with single spaces.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

_TOKEN = re.compile(r"</?[a-z_0-9]+>|[^\s<]+|<")

PAD = "<|pad|>"
UNK = "<|unk|>"
EOS = "<|eos|>"
SPECIALS = (PAD, UNK, EOS)


def word_tokens(text: str) -> list[str]:
    return _TOKEN.findall(text)


class Vocab:
    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.index = {token: i for i, token in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts: list[str], max_size: int = 8000) -> "Vocab":
        counts: dict[str, int] = {}
        for text in texts:
            for token in word_tokens(text):
                counts[token] = counts.get(token, 0) + 1
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(list(SPECIALS) + ranked[: max_size - len(SPECIALS)])

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def encode(self, text: str) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(token, unk) for token in word_tokens(text)]

    def decode(self, ids: list[int]) -> str:
        words = [self.tokens[i] for i in ids
                 if self.tokens[i] not in (PAD, EOS)]
        return " ".join(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.tokens, ensure_ascii=False),
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))
