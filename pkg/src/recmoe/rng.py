"""Counter-based deterministic random streams.

Built on numpy's Philox bit generator. Every distribution here is derived
from raw 53-bit uniforms only (Box-Muller for normals, inverse CDF for
Gumbel), so a given seed and call sequence always reproduces the same
float64 values bit for bit. ``spawn`` derives independent child streams,
which keeps per-sample randomness deterministic even if callers evaluate
samples in parallel.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
GUMBEL_EPS = 1e-12


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class Rng:
    """Deterministic stream of float64 randomness for one consumer."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; (seed, key) fully determines it."""
        return Rng(_splitmix64(self.seed ^ _splitmix64(int(key) + 1)))

    def random(self, shape=None) -> np.ndarray:
        """Uniform float64 in [0, 1)."""
        if shape is None:
            return self._gen.random(dtype=np.float64)
        return self._gen.random(size=shape, dtype=np.float64)

    def uniform(self, lo: float, hi: float, shape=None) -> np.ndarray:
        return lo + (hi - lo) * self.random(shape)

    def normal(self, shape=None, std: float = 1.0) -> np.ndarray:
        """Standard normal via Box-Muller on raw uniforms."""
        scalar = shape is None
        n = 1 if scalar else int(np.prod(shape)) if np.prod(shape) else 0
        if n == 0:
            return np.zeros(shape, dtype=np.float64)
        pairs = (n + 1) // 2
        u1 = np.clip(self._gen.random(size=pairs, dtype=np.float64), 1e-300, None)
        u2 = self._gen.random(size=pairs, dtype=np.float64)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        out = out[:n] * std
        return float(out[0]) if scalar else out.reshape(shape)

    def gumbel(self, shape=None) -> np.ndarray:
        """Gumbel(0,1) noise via -log(-log(U)), U clamped off the endpoints."""
        u = np.clip(self.random(shape), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
        return -np.log(-np.log(u))

    def integers(self, n: int, shape=None) -> np.ndarray:
        """Uniform integers in [0, n), derived from raw uniforms."""
        vals = np.floor(self.random(shape) * n).astype(np.int64)
        return np.minimum(vals, n - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) via key sorting."""
        return np.argsort(self.random((n,)), kind="stable").astype(np.int64)


__all__ = ["Rng", "GUMBEL_EPS"]
