"""Portable seeded PRNG used everywhere randomness is needed.

A splitmix-style 64-bit generator, specified by its update constants so a
trace produced on one machine replays bit-identically on another. Python's
`random` module is deliberately not used: simulation determinism is a
contract, not a convenience.
"""

from __future__ import annotations

import math

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class SplitMix64:
    """64-bit splitmix generator: state += GAMMA, then two xor-multiply mixes."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        # 53-bit mantissa; [0, 1) before scaling.
        u = self.next_u64() >> 11
        return lo + (hi - lo) * (u * 2.0**-53)

    def expovariate(self, rate: float) -> float:
        """Exponential inter-arrival sample; `rate` is events per unit time."""
        if rate <= 0:
            raise ValueError(f"rate must be positive, got {rate}")
        u = self.uniform()
        return -math.log1p(-u) / rate


def _fnv1a(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & _MASK
    return h


def substream_seed(seed: int, *labels) -> int:
    """Derive an independent stream seed from a root seed and string labels."""
    h = seed & _MASK
    for label in labels:
        h = SplitMix64(h ^ _fnv1a(str(label).encode())).next_u64()
    return h
