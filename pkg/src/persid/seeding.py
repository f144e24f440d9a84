"""Deterministic seed splitting.

Sub-seeds are ``seed XOR fnv1a64(role) XOR t`` so any sub-computation can
be replayed on its own from the master seed.
"""

import numpy as np

MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def derive_seed(seed: int, role: str, t: int = 0) -> int:
    return (int(seed) ^ fnv1a64(role) ^ int(t)) & MASK64


def rng_for(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & MASK64)
