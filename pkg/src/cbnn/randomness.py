"""Correlated randomness from pairwise PRF keys.

Party P_i holds keys (k_i, k_{i+1}); key k_j is therefore known to exactly
P_{j-1} and P_j.  The PRF is AES-128 in counter mode, keyed by k_j, with the
nonce built from a kind tag and a per-(key, kind) invocation counter.  Parties
that share a key advance its counters in lockstep as long as they run the
same protocol steps.
"""
from __future__ import annotations

import zlib
from collections import defaultdict

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .ring import Ring

KEY_BYTES = 16


def kind_id(kind: str) -> int:
    return zlib.crc32(kind.encode()) & 0xFFFFFFFF


def prf_stream(key: bytes, kind: str, counter: int, nbytes: int) -> bytes:
    """F(key, kind, counter): ``nbytes`` of AES-CTR keystream."""
    iv = kind_id(kind).to_bytes(4, "little") + counter.to_bytes(8, "little") + bytes(4)
    enc = Cipher(algorithms.AES(key), modes.CTR(iv)).encryptor()
    return enc.update(bytes(nbytes)) + enc.finalize()


class RandomnessCtx:
    """Per-party PRF state: the two pairwise keys plus one private key."""

    def __init__(self, party: int, keys: dict[int, bytes], private_key: bytes, ring: Ring):
        if set(keys) != {party, (party + 1) % 3}:
            raise ValueError(f"P{party} must hold exactly keys k{party} and k{(party + 1) % 3}")
        for k in list(keys.values()) + [private_key]:
            if len(k) != KEY_BYTES:
                raise ValueError("PRF keys are 128-bit")
        self.party = party
        self.keys = dict(keys)
        self.private_key = private_key
        self.ring = ring
        self.counters: dict[tuple, int] = defaultdict(int)

    def _next(self, key_id, kind: str) -> int:
        c = self.counters[(key_id, kind)]
        self.counters[(key_id, kind)] = c + 1
        return c

    def _key(self, key_id) -> bytes:
        if key_id == "private":
            return self.private_key
        try:
            return self.keys[key_id]
        except KeyError:
            raise KeyError(f"P{self.party} does not hold k{key_id}") from None

    def words(self, key_id, kind: str, shape) -> np.ndarray:
        """Uniform ring words from F(k_key_id, kind, cnt)."""
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape, dtype=np.int64))
        raw = prf_stream(self._key(key_id), kind, self._next(key_id, kind), 8 * n)
        return (np.frombuffer(raw, dtype="<u8").astype(np.uint64) & self.ring.mask).reshape(shape)

    def bits(self, key_id, kind: str, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape, dtype=np.int64))
        raw = prf_stream(self._key(key_id), kind, self._next(key_id, kind), n)
        return (np.frombuffer(raw, dtype=np.uint8) & 1).reshape(shape)

    def bounded(self, key_id, kind: str, shape, nbits: int) -> np.ndarray:
        """Uniform integers in [0, 2^nbits)."""
        w = self.words(key_id, kind, shape)
        if nbits >= self.ring.l:
            return w
        return w & np.uint64((1 << nbits) - 1)

    def shared_key(self, other: int) -> int:
        """Index of the key this party shares with ``other``."""
        if other == (self.party + 1) % 3:
            return other
        if other == (self.party - 1) % 3:
            return self.party
        raise ValueError(f"no pairwise key between P{self.party} and P{other}")

    def pair_words(self, other: int, kind: str, shape) -> np.ndarray:
        return self.words(self.shared_key(other), kind, shape)

    def pair_bits(self, other: int, kind: str, shape) -> np.ndarray:
        return self.bits(self.shared_key(other), kind, shape)

    def private_words(self, kind: str, shape) -> np.ndarray:
        return self.words("private", kind, shape)


def dealer_contexts(seed: int, ring: Ring) -> list[RandomnessCtx]:
    """Derive all three parties' contexts from one seed (tests only)."""
    rng = np.random.default_rng(seed)
    k = [rng.bytes(KEY_BYTES) for _ in range(3)]
    return [RandomnessCtx(i, {i: k[i], (i + 1) % 3: k[(i + 1) % 3]}, rng.bytes(KEY_BYTES), ring)
            for i in range(3)]
