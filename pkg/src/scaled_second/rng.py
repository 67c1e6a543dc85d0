"""Pinned, platform-independent weight stream: splitmix64 seeding xoshiro256**.

Layer ``k`` of a network built with seed ``s`` draws from its own substream:
a splitmix64 generator started at ``s + (k + 1) * 0xD1B54A32D192ED03 (mod 2**64)``
yields the four xoshiro256** state words. Each 64-bit output ``r`` becomes a
uniform ``u = (r >> 40) * 2**-24`` in [0, 1); a weight bounded by ``b`` is
``float32((2u - 1) * b)`` evaluated in float64.
"""
from __future__ import annotations

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
SUBSTREAM_STRIDE = 0xD1B54A32D192ED03


def splitmix64_next(state: int):
    """One splitmix64 step on a Python int. Returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def substream_state(seed: int, index: int) -> np.ndarray:
    sm = (int(seed) + (int(index) + 1) * SUBSTREAM_STRIDE) & MASK64
    words = []
    for _ in range(4):
        sm, out = splitmix64_next(sm)
        words.append(out)
    return np.array(words, dtype=np.uint64)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _xoshiro_fill(state, n):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    return out


def xoshiro256ss(state: np.ndarray, n: int) -> np.ndarray:
    """First ``n`` raw 64-bit outputs of xoshiro256** from a 4-word state."""
    return _xoshiro_fill(np.asarray(state, dtype=np.uint64), int(n))


def uniform_weights(seed: int, index: int, shape, bound: float) -> np.ndarray:
    n = int(np.prod(shape))
    raw = xoshiro256ss(substream_state(seed, index), n)
    u = (raw >> np.uint64(40)).astype(np.float64) * (2.0 ** -24)
    return ((2.0 * u - 1.0) * bound).astype(np.float32).reshape(shape)
