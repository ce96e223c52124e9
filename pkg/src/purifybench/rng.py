"""Deterministic counter-based random streams.

Every random draw in the toolkit flows from a single 64-bit master seed.
Stream keys are derived with a splitmix-style mixing function from
(purpose, index, ...) tuples, so independent chains and replicates get
statistically independent streams whose output does not depend on batch
layout or scheduling.

The generator is counter-based: output ``t`` of a stream with key ``k`` is
``mix64(k + (t + 1) * GOLDEN)``.  Gaussian variates are produced by the
Box-Muller transform over 53-bit uniforms.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

_U64 = np.uint64
_TWO_PI = 2.0 * np.pi


def mix64(z):
    """splitmix64 finalizer; accepts a uint64 scalar or array."""
    with np.errstate(over="ignore"):
        z = np.asarray(z, dtype=np.uint64)
        if z.ndim == 0:
            z = (z ^ (z >> _U64(30))) * _M1
            z = (z ^ (z >> _U64(27))) * _M2
            return z ^ (z >> _U64(31))
        return _mix64_into(z.copy())


def _mix64_into(z: np.ndarray) -> np.ndarray:
    """In-place splitmix64 finalizer over a fresh uint64 array."""
    with np.errstate(over="ignore"):
        t = z >> _U64(30)
        z ^= t
        z *= _M1
        np.right_shift(z, _U64(27), out=t)
        z ^= t
        z *= _M2
        np.right_shift(z, _U64(31), out=t)
        z ^= t
    return z


def _hash_token(token) -> np.uint64:
    if isinstance(token, str):
        h = _FNV_OFFSET
        with np.errstate(over="ignore"):
            for b in token.encode("utf-8"):
                h = (h ^ _U64(b)) * _FNV_PRIME
        return h
    return _U64(int(token) & 0xFFFFFFFFFFFFFFFF)


def derive_key(master_seed, *tokens) -> np.uint64:
    """Derive a stream key from a master seed and a (purpose, index, ...) path.

    Identical (seed, path) gives an identical key; distinct paths give
    statistically independent streams.
    """
    with np.errstate(over="ignore"):
        key = mix64(_U64(int(master_seed) & 0xFFFFFFFFFFFFFFFF) + GOLDEN)
        for tok in tokens:
            key = mix64((key ^ _hash_token(tok)) + GOLDEN)
    return _U64(key)


def derive_keys(master_seed, *tokens) -> np.ndarray:
    """Vectorized derive_key: any token may be an integer array.

    Array tokens must share a common broadcast shape; the result is the
    array of keys, elementwise identical to calling derive_key per entry.
    """
    with np.errstate(over="ignore"):
        keys = mix64(_U64(int(master_seed) & 0xFFFFFFFFFFFFFFFF) + GOLDEN)
        for tok in tokens:
            if isinstance(tok, (str, int, np.integer)):
                h = _hash_token(tok)
            else:
                h = np.asarray(tok).astype(np.int64).view(np.uint64) & _U64(0xFFFFFFFFFFFFFFFF)
            keys = mix64((keys ^ h) + GOLDEN)
    return keys


def _raw(key: np.uint64, offset: int, n: int) -> np.ndarray:
    idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(key + idx * GOLDEN)


def _to_unit(bits: np.ndarray, dtype=np.float64) -> np.ndarray:
    # Uniform in (0, 1]; the +1 keeps log() finite.  float64 uses 53 bits
    # of resolution, float32 uses 24 so the transform can stay in float32
    # (float64 transcendentals are several times slower).
    if dtype == np.float64:
        return ((bits >> _U64(11)).astype(np.float64) + 1.0) * 2.0**-53
    return ((bits >> _U64(40)).astype(np.float32) + np.float32(1.0)) * np.float32(2.0**-24)


def _box_muller(u1: np.ndarray, u2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dt = u1.dtype.type
    r = np.sqrt(dt(-2.0) * np.log(u1))
    a = dt(_TWO_PI) * u2
    return r * np.cos(a), r * np.sin(a)


class Rng:
    """A single deterministic stream with a running counter.

    Parameters
    ----------
    seed : int
        Master seed, or a pre-derived key when ``raw_key=True``.
    tokens :
        Optional derivation path appended to the seed.
    """

    def __init__(self, seed, *tokens, raw_key=False):
        if raw_key:
            if tokens:
                raise ValueError("raw_key Rng takes no extra tokens")
            self.key = _U64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        else:
            self.key = derive_key(seed, *tokens)
        self.counter = 0

    def spawn(self, *tokens) -> "Rng":
        """Child stream keyed by this stream's key plus a token path."""
        child = Rng(0, raw_key=True)
        key = self.key
        with np.errstate(over="ignore"):
            for tok in tokens:
                key = mix64((key ^ _hash_token(tok)) + GOLDEN)
        child.key = _U64(key)
        return child

    def next_u64(self, n: int) -> np.ndarray:
        out = _raw(self.key, self.counter, n)
        self.counter += n
        return out

    def uniform(self, shape=()) -> np.ndarray:
        """Uniforms in (0, 1], 53-bit resolution."""
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        u = _to_unit(self.next_u64(n))
        return u.reshape(shape) if shape != () else u[0]

    def gaussian(self, shape=(), dtype=np.float64) -> np.ndarray:
        """I.i.d. standard normals via Box-Muller over the 64-bit stream.

        The 64-bit stream consumption (two words per output pair) is the
        same for every dtype, so counters stay aligned; float32 output is
        a float32 Box-Muller over 24-bit uniforms from the same words.
        """
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        m = (n + 1) // 2
        bits = self.next_u64(2 * m)
        z1, z2 = _box_muller(_to_unit(bits[:m], dtype), _to_unit(bits[m:], dtype))
        z = np.concatenate([z1, z2])[:n]
        return z.reshape(shape) if shape != () else z[0]

    def integers(self, n: int, lo: int, hi: int) -> np.ndarray:
        """n integers uniform in [lo, hi) by 64-bit modular reduction."""
        if hi <= lo:
            raise ValueError("empty integer range")
        span = _U64(hi - lo)
        return (self.next_u64(n) % span).astype(np.int64) + lo


class StreamBank:
    """A batch of independent streams advanced in lockstep.

    Row ``i`` reproduces ``Rng`` with key ``keys[i]`` exactly: drawing from
    a bank of one stream or from the scalar Rng gives identical values, so
    results do not depend on how chains are batched.
    """

    def __init__(self, keys):
        self.keys = np.asarray(keys, dtype=np.uint64).reshape(-1)
        self.counter = 0

    @classmethod
    def from_tokens(cls, master_seed, purpose, indices) -> "StreamBank":
        keys = [derive_key(master_seed, purpose, *np.atleast_1d(ix)) for ix in indices]
        return cls(keys)

    def __len__(self):
        return len(self.keys)

    def _raw_block(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return mix64(self.keys[:, None] + idx[None, :] * GOLDEN)

    def gaussian(self, n: int, dtype=np.float64) -> np.ndarray:
        """(rows, n) standard normals; row i matches Rng(keys[i]).gaussian(n)."""
        m = (n + 1) // 2
        bits = self._raw_block(2 * m)
        z1, z2 = _box_muller(_to_unit(bits[:, :m], dtype), _to_unit(bits[:, m:], dtype))
        return np.concatenate([z1, z2], axis=1)[:, :n]
