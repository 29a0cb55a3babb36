"""Keyed counter-based random streams.

Every stochastic draw in the package comes from a Philox generator whose
128-bit key is derived from an explicit tuple of key parts, e.g.
``generator(seed, "traj", epoch, index)``.  No global RNG state exists, so a
draw is a pure function of its key and results do not depend on call order,
batch shape, or worker count.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # Finalizer from splitmix64; full-period bijection on 64-bit words.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _fold_part(part: int | str) -> int:
    if isinstance(part, str):
        acc = 0x5354524B  # domain separator for string parts
        for chunk_start in range(0, len(part), 8):
            word = int.from_bytes(part[chunk_start:chunk_start + 8].encode("utf-8"), "little")
            acc = _splitmix64(acc ^ word)
        return acc
    return int(part) & _MASK64


def stream_key(*parts: int | str) -> tuple[int, int]:
    """Derive a 2-word Philox key from an ordered tuple of key parts."""
    k0 = 0x6D72636669740000  # package tag; distinct empty-tuple key
    k1 = len(parts) & _MASK64
    for part in parts:
        folded = _fold_part(part)
        k0 = _splitmix64(k0 ^ folded)
        k1 = _splitmix64((k1 + folded) & _MASK64)
    return k0, k1


def generator(*parts: int | str) -> np.random.Generator:
    """A fresh Generator on the stream named by ``parts``."""
    k0, k1 = stream_key(*parts)
    return np.random.Generator(np.random.Philox(key=np.array([k0, k1], dtype=np.uint64)))
