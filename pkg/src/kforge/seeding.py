"""Deterministic, parallel-safe derivation of per-item randomness.

Every stochastic decision in the pipeline (bucket draws, oracle slots,
shuffles) derives from the run seed plus a purpose string and item ids, so
results never depend on iteration order or shared RNG state.
"""

from __future__ import annotations

import hashlib
import random

_SEP = "\x1f"


def digest_int(*parts: object) -> int:
    joined = _SEP.join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(joined.encode("utf-8")).digest()[:8], "big")


def unit_float(*parts: object) -> float:
    """Uniform float in [0, 1) keyed by *parts*."""
    return digest_int(*parts) / 2.0**64


def derive_rng(*parts: object) -> random.Random:
    return random.Random(digest_int(*parts))
