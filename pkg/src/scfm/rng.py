"""Seeded xoshiro256++ streams with named substreams.

Every random quantity in an experiment (data draws, noise, triples, shifts,
guidance scales, projection directions) comes from a substream keyed by the
experiment seed and a short name. The key is ``seed ^ fnv1a64(name)``; the
256-bit state is four consecutive splitmix64 outputs of that key, so streams
can be reproduced bit-for-bit by any implementation of the two generators.
"""

import math

import numba
import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_INV_2_53 = 1.0 / (1 << 53)


def splitmix64(x):
    """Return ``(next_state, output)`` of one splitmix64 step."""
    x = (x + _GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def fnv1a64(name):
    h = _FNV_OFFSET
    for byte in name.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def seed_state(key):
    state = []
    x = key & MASK64
    for _ in range(4):
        x, out = splitmix64(x)
        state.append(out)
    if not any(state):
        raise ValueError("xoshiro256++ state must not be all zero")
    return state


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True)
def _fill_uint64(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.shape[0]):
        out[i] = _rotl(s0 + s3, 23) + s0
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


class Xoshiro256pp:
    """xoshiro256++ generator with numpy-shaped convenience draws.

    Floats use the top 53 bits (``(x >> 11) * 2**-53``), Gaussians use the
    Box-Muller transform on consecutive uniform pairs, bounded integers use
    ``floor(u * high)``.
    """

    def __init__(self, key=0, state=None):
        if state is None:
            state = seed_state(key)
        self._state = np.array(state, dtype=np.uint64)

    @classmethod
    def substream(cls, seed, name):
        return cls(key=(int(seed) & MASK64) ^ fnv1a64(name))

    @property
    def state(self):
        return [int(s) for s in self._state]

    def next_uint64(self, n):
        out = np.empty(int(n), dtype=np.uint64)
        _fill_uint64(self._state, out)
        return out

    def random(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        u = self.random(size)
        return low + (high - low) * u

    def normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        m = n + (n & 1)
        u = self.random(m).reshape(-1, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, high, size=None):
        if high <= 0:
            raise ValueError("high must be positive")
        u = self.random(1 if size is None else size)
        k = np.minimum(np.floor(np.asarray(u) * high), high - 1).astype(np.int64)
        return int(k.reshape(-1)[0]) if size is None else k

    def choice_without_replacement(self, n, m):
        """First ``m`` entries of a partial Fisher-Yates shuffle of ``range(n)``."""
        if m > n:
            raise ValueError(f"cannot draw {m} items from {n} without replacement")
        perm = np.arange(n, dtype=np.int64)
        u = self.random(max(m, 1))
        for i in range(m):
            j = i + min(int(u[i] * (n - i)), n - i - 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm[:m].copy()


class SeedStreams:
    """Factory for the named substreams of one experiment seed."""

    def __init__(self, seed):
        self.seed = int(seed)
        self._streams = {}

    def __getitem__(self, name):
        if name not in self._streams:
            self._streams[name] = Xoshiro256pp.substream(self.seed, name)
        return self._streams[name]
