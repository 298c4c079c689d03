"""Deterministic random number streams.

All simulation in this package draws from :class:`RandomStream`, a thin
wrapper around the Philox 4x64 counter-based bit generator.  Uniform
variates take the top 53 bits of each 64-bit word; normal variates apply
the inverse normal CDF (Cephes ``ndtri``, a rational erfinv approximation)
to those uniforms.  Both maps are fixed, so a (seed, stream) pair yields a
bitwise-identical sequence on every platform and every run.

Stream splitting uses ``numpy.random.SeedSequence`` spawn keys: stream
``k`` of seed ``s`` is statistically independent of stream ``j != k`` and
never overlaps it.  ``child_seeds`` derives fresh 64-bit seeds for nested
splitting (one per study replicate, say).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.random import Philox, SeedSequence
from scipy.special import ndtri

GENERATOR_ID = "philox4x64-ndtri/1"

_U64_MAX = 2**64 - 1


class RandomStream:
    """One exclusively-owned substream of a seeded Philox generator."""

    def __init__(self, seed: int, stream: int | tuple[int, ...] = 0):
        seed = int(seed)
        if not 0 <= seed <= _U64_MAX:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        key = (stream,) if isinstance(stream, int) else tuple(stream)
        self.seed = seed
        self.stream = key
        self._bitgen = Philox(SeedSequence(entropy=seed, spawn_key=key))

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words."""
        return self._bitgen.random_raw(n)

    def uniforms(self, shape: int | tuple[int, ...]) -> np.ndarray:
        """Uniform draws on the open interval (0, 1)."""
        n = int(np.prod(shape))
        u = ((self.raw(n) >> np.uint64(11)) + 0.5) * 2.0**-53
        return u.reshape(shape)

    def normals(self, shape: int | tuple[int, ...]) -> np.ndarray:
        """Standard normal draws via inverse-CDF transform."""
        return ndtri(self.uniforms(shape))


def child_seeds(seed: int, index: int, count: int = 1) -> tuple[int, ...]:
    """Derive ``count`` independent 64-bit child seeds for substream ``index``.

    Children of distinct indices (and distinct positions within one index)
    are independent; the derivation is pure arithmetic, so it is stable
    across runs and platforms.
    """
    ss = SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    state = ss.generate_state(count, np.uint64)
    return tuple(int(x) for x in state)


def normal_log_density(x: np.ndarray) -> np.ndarray:
    """Log density of the standard normal, elementwise."""
    x = np.asarray(x, dtype=float)
    return -0.5 * x * x - 0.5 * math.log(2.0 * math.pi)
