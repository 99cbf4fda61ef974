"""Portable random numbers.

All randomness in the package (weight init, dropout masks, patch sampling,
phantoms) comes from :class:`Rng`, so fixtures are reproducible bit for bit
on any platform and numpy version.

Algorithm
---------
The generator runs ``LANES`` independent xoshiro256** states side by side.
A draw of ``n`` values advances every lane ``ceil(n / LANES)`` times and
returns the outputs round-major (round 0 lanes 0..LANES-1, then round 1, ...),
discarding the tail of the last round.

One xoshiro256** step on state ``(s0, s1, s2, s3)`` (all uint64, wrapping)::

    out = rotl(s1 * 5, 7) * 9
    t   = s1 << 17
    s2 ^= s0;  s3 ^= s1;  s1 ^= s2;  s0 ^= s3
    s2 ^= t;   s3 = rotl(s3, 45)

Seeding: the ``seed`` and any extra integer ``stream`` keys are folded into
one 64-bit key with splitmix64 (``key = splitmix64(key ^ k)`` per key), then a
splitmix64 sequence started at ``key`` fills the 4 x LANES state words
lane-major.  splitmix64::

    x += 0x9E3779B97F4A7C15
    z = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

Derived values: uniforms are ``(u >> 11) * 2**-53``; normals use Box-Muller
on pairs of uniforms (cos branch first, then sin); bounded integers are
``floor(uniform * high)``.
"""
import zlib

import numpy as np

from . import _accel

LANES = 256
_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x):
    """One splitmix64 step on a Python int; returns ``(new_x, output)``."""
    x = (x + _GOLDEN) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return x, z ^ (z >> 31)


def _fold_key(seed, stream):
    key = int(seed) & _M64
    for k in stream:
        if isinstance(k, str):
            k = zlib.crc32(k.encode("utf-8"))
        _, key = splitmix64(key ^ (int(k) & _M64))
    return key


def _rotl_np(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


def _rounds_numpy(state, rounds, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    five, nine, seventeen = np.uint64(5), np.uint64(9), np.uint64(17)
    with np.errstate(over="ignore"):
        for r in range(rounds):
            out[r] = _rotl_np(s1 * five, 7) * nine
            t = s1 << seventeen
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3[:] = _rotl_np(s3, 45)


@_accel.optional_njit(cache=True)
def _rounds_numba(state, rounds, out):
    lanes = state.shape[1]
    for r in range(rounds):
        for j in range(lanes):
            s0 = state[0, j]
            s1 = state[1, j]
            s2 = state[2, j]
            s3 = state[3, j]
            v = s1 * np.uint64(5)
            v = (v << np.uint64(7)) | (v >> np.uint64(57))
            out[r, j] = v * np.uint64(9)
            t = s1 << np.uint64(17)
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
            state[0, j] = s0
            state[1, j] = s1
            state[2, j] = s2
            state[3, j] = s3


class Rng:
    """Multi-lane xoshiro256** generator, see module docstring."""

    def __init__(self, seed, *stream, use_numba=None):
        self.seed = int(seed)
        self.stream = tuple(stream)
        self.use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
        x = _fold_key(seed, stream)
        words = np.empty(4 * LANES, dtype=np.uint64)
        for i in range(4 * LANES):
            x, words[i] = splitmix64(x)
        # lane-major fill: lane j owns words[4j:4j+4]
        self.state = np.ascontiguousarray(words.reshape(LANES, 4).T)

    def spawn(self, *stream):
        """Independent child generator keyed on this one's seed and stream."""
        return Rng(self.seed, *self.stream, *stream, use_numba=self.use_numba)

    def uint64(self, n):
        n = int(n)
        rounds = -(-n // LANES)
        out = np.empty((rounds, LANES), dtype=np.uint64)
        if rounds:
            if self.use_numba:
                _rounds_numba(self.state, rounds, out)
            else:
                _rounds_numpy(self.state, rounds, out)
        return out.reshape(-1)[:n]

    def random(self, n):
        return (self.uint64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, n, loc=0.0, scale=1.0):
        m = -(-int(n) // 2)
        u = self.random(2 * m)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = rad * np.cos(2.0 * np.pi * u2)
        z[1::2] = rad * np.sin(2.0 * np.pi * u2)
        return loc + scale * z[:n]

    def integers(self, high, n):
        high = int(high)
        if high < 1:
            raise ValueError("high must be >= 1")
        return np.minimum((self.random(n) * high).astype(np.int64), high - 1)
