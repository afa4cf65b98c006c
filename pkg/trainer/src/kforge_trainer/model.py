"""Tiny causal transformer with manually injected low-rank adapters.

The base model's weights derive deterministically from ``base_model_id`` (a
preset name seeds the init), so a checkpoint only needs to store the adapter
matrices plus the vocabulary. Only adapter parameters are trainable.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

PRESETS = {
    "tiny": {"d_model": 64, "n_heads": 2, "n_layers": 2, "max_seq_len": 512},
    "small": {"d_model": 128, "n_heads": 4, "n_layers": 4, "max_seq_len": 1024},
}


@dataclass
class ModelSpec:
    base_model_id: str
    vocab_size: int
    d_model: int
    n_heads: int
    n_layers: int
    max_seq_len: int

    @classmethod
    def from_preset(cls, base_model_id: str, vocab_size: int) -> "ModelSpec":
        if base_model_id not in PRESETS:
            raise ValueError(
                f"unknown base model {base_model_id!r}; available: {sorted(PRESETS)}"
            )
        return cls(base_model_id=base_model_id, vocab_size=vocab_size, **PRESETS[base_model_id])

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def _seed_for(base_model_id: str, vocab_size: int) -> int:
    digest = hashlib.sha256(f"{base_model_id}|{vocab_size}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable rank-r update B @ A."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float | None = None):
        super().__init__()
        self.base = base
        for param in self.base.parameters():
            param.requires_grad_(False)
        self.rank = rank
        self.scale = (alpha if alpha is not None else rank) / rank
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + F.linear(F.linear(x, self.lora_a), self.lora_b) * self.scale


class Block(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        d = spec.d_model
        self.n_heads = spec.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.mlp_up = nn.Linear(d, 4 * d)
        self.mlp_down = nn.Linear(4 * d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, seq, d = x.shape
        h = self.ln1(x)

        def heads(t):
            return t.view(batch, seq, self.n_heads, d // self.n_heads).transpose(1, 2)

        q, k, v = heads(self.q_proj(h)), heads(self.k_proj(h)), heads(self.v_proj(h))
        attn = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        attn = attn.transpose(1, 2).reshape(batch, seq, d)
        x = x + self.out_proj(attn)
        x = x + self.mlp_down(F.gelu(self.mlp_up(self.ln2(x))))
        return x


class TinyCausalLM(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.tok_emb = nn.Embedding(spec.vocab_size, spec.d_model)
        self.pos_emb = nn.Embedding(spec.max_seq_len, spec.d_model)
        self.blocks = nn.ModuleList(Block(spec) for _ in range(spec.n_layers))
        self.ln_f = nn.LayerNorm(spec.d_model)
        self.lm_head = nn.Linear(spec.d_model, spec.vocab_size, bias=False)

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        seq = input_ids.shape[1]
        if seq > self.spec.max_seq_len:
            raise ValueError(f"sequence length {seq} exceeds {self.spec.max_seq_len}")
        positions = torch.arange(seq, device=input_ids.device)
        x = self.tok_emb(input_ids) + self.pos_emb(positions)[None]
        for block in self.blocks:
            x = block(x)
        return self.lm_head(self.ln_f(x))

    @torch.no_grad()
    def generate(self, input_ids: list[int], max_new_tokens: int, eos_id: int) -> list[int]:
        """Greedy decoding; returns only the newly generated ids."""
        self.eval()
        ids = list(input_ids)
        out: list[int] = []
        for _ in range(max_new_tokens):
            window = ids[-self.spec.max_seq_len:]
            logits = self(torch.tensor([window]))
            next_id = int(logits[0, -1].argmax())
            if next_id == eos_id:
                break
            out.append(next_id)
            ids.append(next_id)
        return out


def build_base_model(spec: ModelSpec) -> TinyCausalLM:
    """Deterministic base weights: the preset id and vocab size seed the init."""
    generator_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(_seed_for(spec.base_model_id, spec.vocab_size))
        model = TinyCausalLM(spec)
    finally:
        torch.random.set_rng_state(generator_state)
    for param in model.parameters():
        param.requires_grad_(False)
    return model


LORA_TARGETS = ("q_proj", "k_proj", "v_proj", "out_proj")


def inject_adapters(model: TinyCausalLM, rank: int, alpha: float | None = None) -> TinyCausalLM:
    """Swap attention projections for LoRA-wrapped versions (in place)."""
    for block in model.blocks:
        for name in LORA_TARGETS:
            setattr(block, name, LoRALinear(getattr(block, name), rank, alpha))
    return model


def adapter_state(model: TinyCausalLM) -> dict[str, torch.Tensor]:
    return {name: tensor for name, tensor in model.state_dict().items()
            if "lora_" in name}


def trainable_parameters(model: TinyCausalLM):
    return [p for p in model.parameters() if p.requires_grad]
