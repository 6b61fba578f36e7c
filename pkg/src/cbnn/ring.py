"""Arithmetic over Z_{2^l} and fixed-point encoding.

Ring tensors are plain ``numpy.uint64`` arrays holding the low ``l`` bits of
each element.  Any ``l`` in 1..64 works; the transport layer additionally
requires ``l`` to be a multiple of 8 so words serialize to whole bytes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RING_DTYPE = np.uint64


@dataclass(frozen=True)
class Ring:
    """The ring Z_{2^l}."""

    l: int = 32

    def __post_init__(self):
        if not 1 <= self.l <= 64:
            raise ValueError(f"ring width must be in 1..64, got {self.l}")

    @property
    def modulus(self) -> int:
        return 1 << self.l

    @property
    def mask(self) -> np.uint64:
        return np.uint64(self.modulus - 1)

    @property
    def word_bytes(self) -> int:
        return (self.l + 7) // 8

    def reduce(self, a) -> np.ndarray:
        a = np.asarray(a)
        if a.dtype != RING_DTYPE:
            if a.dtype.kind == "O":
                a = np.vectorize(lambda v: int(v) % self.modulus, otypes=[RING_DTYPE])(a)
                return a
            if a.dtype.kind not in "iub":
                raise TypeError(f"ring values must be integers, got {a.dtype}")
            a = a.astype(np.int64).astype(RING_DTYPE)
        return a & self.mask

    def from_signed(self, a) -> np.ndarray:
        """Map signed integers to their two's-complement ring representatives."""
        a = np.asarray(a)
        if a.dtype.kind == "O":
            return self.reduce(a)
        return np.asarray(a, dtype=np.int64).astype(RING_DTYPE) & self.mask

    def signed(self, a) -> np.ndarray:
        """Signed interpretation as int64 (values >= 2^(l-1) are negative)."""
        a = self.reduce(a)
        if self.l == 64:
            return a.view(np.int64)
        shift = np.int64(64 - self.l)
        return (a.astype(np.int64) << shift) >> shift

    def msb(self, a) -> np.ndarray:
        return ((self.reduce(a) >> np.uint64(self.l - 1)) & np.uint64(1)).astype(np.uint8)

    def add(self, a, b) -> np.ndarray:
        with np.errstate(over="ignore"):
            return (self.reduce(a) + self.reduce(b)) & self.mask

    def sub(self, a, b) -> np.ndarray:
        with np.errstate(over="ignore"):
            return (self.reduce(a) - self.reduce(b)) & self.mask

    def neg(self, a) -> np.ndarray:
        return self.sub(0, a)

    def mul(self, a, b) -> np.ndarray:
        with np.errstate(over="ignore"):
            return (self.reduce(a) * self.reduce(b)) & self.mask

    def matmul(self, a, b) -> np.ndarray:
        # uint64 accumulation wraps mod 2^64, and 2^l divides 2^64.
        with np.errstate(over="ignore"):
            return np.matmul(self.reduce(a), self.reduce(b)) & self.mask

    def einsum(self, spec: str, *ops) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.einsum(spec, *[self.reduce(o) for o in ops]) & self.mask

    def random(self, rng: np.random.Generator, shape) -> np.ndarray:
        return rng.integers(0, self.modulus, size=shape, dtype=np.uint64)


def ring_add(a, b, l: int = 32):
    return Ring(l).add(a, b)


def ring_sub(a, b, l: int = 32):
    return Ring(l).sub(a, b)


def ring_mul(a, b, l: int = 32):
    return Ring(l).mul(a, b)


def msb(a, l: int = 32):
    return Ring(l).msb(a)


@dataclass(frozen=True)
class FixedPoint:
    """Fixed-point codec: reals are stored as round(x * 2^f) in Z_{2^l}."""

    l: int = 32
    f: int = 13

    def __post_init__(self):
        if not 0 <= self.f < self.l:
            raise ValueError(f"need 0 <= f < l, got f={self.f}, l={self.l}")

    @property
    def ring(self) -> Ring:
        return Ring(self.l)

    @property
    def limit(self) -> float:
        """Exclusive bound on |x| for encodable reals."""
        return float(2 ** (self.l - self.f - 1))

    def encode(self, x, scale: int | None = None) -> np.ndarray:
        """Encode reals at ``2^scale`` (default ``2^f``), rounding half away from zero."""
        scale = self.f if scale is None else scale
        x = np.asarray(x, dtype=np.float64)
        limit = 2.0 ** (self.l - scale - 1)
        if not np.all(np.isfinite(x)) or np.any(np.abs(x) >= limit):
            raise OverflowError(
                f"value out of fixed-point range: need |x| < 2^{self.l - scale - 1}, "
                f"max |x| = {np.max(np.abs(x)) if x.size else 0}")
        scaled = x * (2.0 ** scale)
        rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
        return self.ring.from_signed(rounded.astype(np.int64))

    def decode(self, e, scale: int | None = None) -> np.ndarray:
        scale = self.f if scale is None else scale
        return self.ring.signed(e).astype(np.float64) / (2.0 ** scale)


def encode(x, codec: FixedPoint = FixedPoint()):
    return codec.encode(x)


def decode(e, codec: FixedPoint = FixedPoint()):
    return codec.decode(e)
