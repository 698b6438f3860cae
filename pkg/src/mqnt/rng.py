"""Pinned pseudo-random generator for reproducible data selection.

Every sampling decision that becomes part of experiment provenance runs
through SplitMix64 so that a (seed, policy) pair rebuilds bit-identical
selections on any platform and in any implementation language.

SplitMix64, full algorithm (64-bit wrapping arithmetic):

    state = (state + 0x9E3779B97F4A7C15) mod 2^64
    z = state
    z = ((z XOR (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
    z = ((z XOR (z >> 27)) * 0x94D049BB133111EB) mod 2^64
    output = z XOR (z >> 31)

Test vectors (seed 0, first three outputs):

    0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F

Bounded draws use the plain modulo method, ``next_u64() % n``; the modulo
bias at desk-scale ``n`` is irrelevant and the rule is trivial to restate.
A partial Fisher-Yates shuffle built on those draws does sampling without
replacement:

    idx = [0, 1, ..., n-1]
    for i in 0 .. k-1:
        j = i + (next_u64() mod (n - i))
        swap idx[i], idx[j]
    return idx[:k]
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB


class SplitMix64:
    """Splittable 64-bit generator; update rules in the module docstring."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        z = self._state
        z = ((z ^ (z >> 30)) * _MUL1) & _MASK
        z = ((z ^ (z >> 27)) * _MUL2) & _MASK
        return (z ^ (z >> 31)) & _MASK

    def next_below(self, n: int) -> int:
        """Bounded draw in [0, n) via the modulo method."""
        if n <= 0:
            raise ValueError("bound must be positive")
        return self.next_u64() % n

    def split(self) -> "SplitMix64":
        """Child generator seeded from the next output."""
        return SplitMix64(self.next_u64())


def sample_without_replacement(n: int, k: int, seed: int) -> list[int]:
    """First ``k`` entries of a seeded partial Fisher-Yates shuffle of range(n)."""
    if k < 0 or k > n:
        raise ValueError(f"cannot sample {k} from {n}")
    rng = SplitMix64(seed)
    idx = list(range(n))
    for i in range(k):
        j = i + rng.next_below(n - i)
        idx[i], idx[j] = idx[j], idx[i]
    return idx[:k]
