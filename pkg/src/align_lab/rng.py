"""Seeded xoshiro256** stream with Box-Muller normals.

Every random quantity in an experiment is drawn from one :class:`Generator`
in a fixed order, so a seed pins the whole run independent of numpy's
global RNG or its version.

Draw order for matrices is row-major; normals come in Box-Muller pairs and
the second member of a pair is served by the next call.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


def splitmix64(state: int):
    """Yield the SplitMix64 sequence from ``state``."""
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        yield z ^ (z >> 31)


class Generator:
    def __init__(self, seed: int = 0):
        seed = int(seed)
        if not 0 <= seed <= _MASK:
            raise ValueError("seed must be an unsigned 64-bit integer")
        sm = splitmix64(seed)
        self._s = [next(sm) for _ in range(4)]
        self._spare = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform on [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def normal(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.uniform()  # (0, 1], keeps log finite
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normals(self, *shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        out = np.fromiter((self.normal() for _ in range(count)), dtype=np.float64, count=count)
        return out.reshape(shape) if shape else out

    def uniforms(self, *shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        out = np.fromiter((self.uniform() for _ in range(count)), dtype=np.float64, count=count)
        out = low + (high - low) * out
        return out.reshape(shape) if shape else out

    def integers(self, high: int) -> int:
        """Uniform integer in [0, high) by rejection on the top bits."""
        if high <= 0:
            raise ValueError("high must be positive")
        bits = max(1, (high - 1).bit_length())
        while True:
            v = self.next_u64() >> (64 - bits)
            if v < high:
                return v

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        p = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            p[i], p[j] = p[j], p[i]
        return np.array(p, dtype=np.int64)

    def orthonormal(self, k: int) -> np.ndarray:
        """Haar-distributed orthogonal ``k x k`` matrix (QR with sign-fixed R)."""
        q, r = np.linalg.qr(self.normals(k, k))
        d = np.sign(np.diag(r))
        d[d == 0] = 1.0
        return q * d


def rng(seed: int) -> Generator:
    return Generator(seed)
