"""Deterministic, splittable randomness.

Single generator style: splitmix64. Every stream is identified by an integer
seed, child streams are derived explicitly (never from hidden global state),
and bulk draws are counter-based so a vectorized fill produces exactly the
same values as repeated scalar draws.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB

_TWO53_INV = 2.0**-53


def mix64(z: int) -> int:
    """Finalizer: avalanche a 64-bit integer into a pseudo-random one."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MUL1) & _MASK
    z = ((z ^ (z >> 27)) * _MUL2) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps modulo 2^64, matching the scalar masked path.
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_MUL1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_MUL2)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, label: str) -> int:
    """Stable child seed for a named stream (model/data/train/...)."""
    h = 0xCBF29CE484222325
    for b in label.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return mix64((seed & _MASK) ^ h)


class SplitMix64:
    """splitmix64 stream. The i-th output after seeding (i >= 1) is
    mix64(seed + i * GAMMA), so block fills can be computed as a counter
    range without losing equivalence with one-at-a-time draws."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return mix64(self._state)

    def fill_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError(f"fill size must be >= 0, got {n}")
        idx = np.arange(1, n + 1, dtype=np.uint64)
        base = np.uint64(self._state) + idx * np.uint64(_GAMMA)
        self._state = (self._state + n * _GAMMA) & _MASK
        return _mix64_array(base)

    def split(self) -> "SplitMix64":
        return SplitMix64(self.next_u64())

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform in [0, 1), float64, 53-bit mantissa resolution."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        bits = self.fill_u64(n)
        out = (bits >> np.uint64(11)).astype(np.float64) * _TWO53_INV
        return out.reshape(shape) if shape else out[0]

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Standard Box-Muller pairs over counter-based uniforms."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (n + 1) // 2
        bits = self.fill_u64(2 * pairs)
        # u1 in (0, 1] so the log never sees zero.
        u1 = ((bits[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO53_INV
        u2 = (bits[pairs:] >> np.uint64(11)).astype(np.float64) * _TWO53_INV
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        z = z * std + mean
        return z.reshape(shape) if shape else z[0]

    def randint(self, lo: int, hi: int, shape=None):
        """Integers in [lo, hi). Modulo fold; span must be tiny next to 2^64."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        span = hi - lo
        if shape is None:
            return lo + self.next_u64() % span
        n = int(np.prod(shape, dtype=np.int64))
        vals = self.fill_u64(n) % np.uint64(span)
        return (vals.astype(np.int64) + lo).reshape(shape)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        self.shuffle(idx)
        return np.asarray(idx, dtype=np.int64)
