"""Replicated 2-out-of-3 secret sharing over Z_{2^l} and Z_2.

A secret x = x_0 + x_1 + x_2 is held as pairs: P_i keeps (x_i, x_{i+1}).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .randomness import RandomnessCtx
from .ring import Ring


class InconsistentShares(ValueError):
    """Replicated components disagree between two parties."""


@dataclass(frozen=True)
class RssShare:
    """P_party's arithmetic share: ``lo`` is x_party, ``hi`` is x_{party+1}."""

    party: int
    lo: np.ndarray
    hi: np.ndarray
    ring: Ring

    def __post_init__(self):
        if self.party not in (0, 1, 2):
            raise ValueError(f"bad party id {self.party}")
        if np.shape(self.lo) != np.shape(self.hi):
            raise ValueError("share components differ in shape")

    @property
    def shape(self):
        return np.shape(self.lo)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def _check(self, other: "RssShare"):
        if other.party != self.party:
            raise ValueError(f"mixing shares of P{self.party} and P{other.party}")
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")

    def __add__(self, other: "RssShare") -> "RssShare":
        self._check(other)
        r = self.ring
        return RssShare(self.party, r.add(self.lo, other.lo), r.add(self.hi, other.hi), r)

    def __sub__(self, other: "RssShare") -> "RssShare":
        self._check(other)
        r = self.ring
        return RssShare(self.party, r.sub(self.lo, other.lo), r.sub(self.hi, other.hi), r)

    def __neg__(self) -> "RssShare":
        r = self.ring
        return RssShare(self.party, r.neg(self.lo), r.neg(self.hi), r)

    def scale(self, c) -> "RssShare":
        """Multiply by a public (integer) constant or tensor, locally."""
        r = self.ring
        c = r.from_signed(c) if np.asarray(c).dtype.kind == "i" else r.reduce(c)
        return RssShare(self.party, r.mul(self.lo, c), r.mul(self.hi, c), r)

    def add_const(self, c) -> "RssShare":
        """Add a public constant; P_0 adds it to its first component, P_2 to its second."""
        r = self.ring
        c = r.from_signed(c) if np.asarray(c).dtype.kind == "i" else r.reduce(c)
        c = np.broadcast_to(c, self.shape)
        lo, hi = self.lo, self.hi
        if self.party == 0:
            lo = r.add(lo, c)
        elif self.party == 2:
            hi = r.add(hi, c)
        return RssShare(self.party, np.asarray(lo), np.asarray(hi), r)

    def map(self, fn) -> "RssShare":
        """Apply the same linear index operation (reshape, slice, ...) to both components."""
        return RssShare(self.party, np.asarray(fn(self.lo)), np.asarray(fn(self.hi)), self.ring)

    def reshape(self, *shape) -> "RssShare":
        return self.map(lambda a: a.reshape(*shape))

    def sum(self, axis) -> "RssShare":
        r = self.ring
        with np.errstate(over="ignore"):
            return RssShare(self.party, np.sum(self.lo, axis=axis, dtype=np.uint64) & r.mask,
                            np.sum(self.hi, axis=axis, dtype=np.uint64) & r.mask, r)


@dataclass(frozen=True)
class BitShare:
    """P_party's replicated share of bits modulo 2."""

    party: int
    lo: np.ndarray
    hi: np.ndarray

    @property
    def shape(self):
        return np.shape(self.lo)

    def __xor__(self, other: "BitShare") -> "BitShare":
        if other.party != self.party or other.shape != self.shape:
            raise ValueError("incompatible bit shares")
        return BitShare(self.party, self.lo ^ other.lo, self.hi ^ other.hi)

    def xor_const(self, c) -> "BitShare":
        c = np.broadcast_to(np.asarray(c, dtype=np.uint8) & 1, self.shape)
        lo, hi = self.lo, self.hi
        if self.party == 0:
            lo = lo ^ c
        elif self.party == 2:
            hi = hi ^ c
        return BitShare(self.party, np.asarray(lo), np.asarray(hi))

    def invert(self) -> "BitShare":
        return self.xor_const(1)


def components_to_shares(c: list[np.ndarray], ring: Ring) -> tuple[RssShare, RssShare, RssShare]:
    return tuple(RssShare(i, ring.reduce(c[i]), ring.reduce(c[(i + 1) % 3]), ring) for i in range(3))


def bits_to_shares(c: list[np.ndarray]) -> tuple[BitShare, BitShare, BitShare]:
    c = [np.asarray(x, dtype=np.uint8) & 1 for x in c]
    return tuple(BitShare(i, c[i], c[(i + 1) % 3]) for i in range(3))


def share_secret(x, rng: np.random.Generator, ring: Ring = Ring()) -> tuple[RssShare, RssShare, RssShare]:
    """Dealer-side sharing of a ring tensor."""
    x = ring.reduce(x)
    c1 = ring.random(rng, x.shape)
    c2 = ring.random(rng, x.shape)
    c0 = ring.sub(ring.sub(x, c1), c2)
    return components_to_shares([c0, c1, c2], ring)


def share_bits(b, rng: np.random.Generator) -> tuple[BitShare, BitShare, BitShare]:
    b = np.asarray(b, dtype=np.uint8) & 1
    c1 = rng.integers(0, 2, size=b.shape, dtype=np.uint8)
    c2 = rng.integers(0, 2, size=b.shape, dtype=np.uint8)
    return bits_to_shares([b ^ c1 ^ c2, c1, c2])


def _components(a, b) -> dict[int, np.ndarray]:
    if a.party == b.party:
        raise ValueError("reconstruction needs shares of two distinct parties")
    comp: dict[int, np.ndarray] = {}
    for s in (a, b):
        for idx, val in ((s.party, s.lo), ((s.party + 1) % 3, s.hi)):
            if idx in comp and not np.array_equal(comp[idx], val):
                raise InconsistentShares(f"component x_{idx} differs between P{a.party} and P{b.party}")
            comp[idx] = val
    return comp


def reconstruct(a: RssShare, b: RssShare) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    comp = _components(a, b)
    r = a.ring
    return r.add(r.add(comp[0], comp[1]), comp[2])


def reconstruct_bits(a: BitShare, b: BitShare) -> np.ndarray:
    comp = _components(a, b)
    return (comp[0] ^ comp[1] ^ comp[2]).astype(np.uint8)


def check_consistent(shares) -> None:
    """Debug validator: all three parties' replicas agree pairwise."""
    for i in range(3):
        j = (i + 1) % 3
        if not np.array_equal(shares[i].hi, shares[j].lo):
            raise InconsistentShares(f"x_{j} differs between P{i} and P{j}")


def add_shares(x: RssShare, y: RssShare) -> RssShare:
    return x + y


def add_const(x: RssShare, c) -> RssShare:
    return x.add_const(c)


def xor_bitshares(x: BitShare, y: BitShare) -> BitShare:
    return x ^ y


# --------------------------------------------------------------------------
# correlated randomness


def zero_randomness_3of3(ctx: RandomnessCtx, shape, kind: str = "zero") -> np.ndarray:
    """a_i = F(k_{i+1}) - F(k_i); the three a_i sum to 0."""
    r = ctx.ring
    mine = ctx.words(ctx.party, kind, shape)
    nxt = ctx.words((ctx.party + 1) % 3, kind, shape)
    return r.sub(nxt, mine)


def zero_bits_3of3(ctx: RandomnessCtx, shape, kind: str = "zero-bits") -> np.ndarray:
    return ctx.bits(ctx.party, kind, shape) ^ ctx.bits((ctx.party + 1) % 3, kind, shape)


def rand_rss_2of3(ctx: RandomnessCtx, shape, kind: str = "rand") -> RssShare:
    """RSS of a random value nobody knows: (a_i, a_{i+1}) = (F(k_i), F(k_{i+1}))."""
    lo = ctx.words(ctx.party, kind, shape)
    hi = ctx.words((ctx.party + 1) % 3, kind, shape)
    return RssShare(ctx.party, lo, hi, ctx.ring)


def rand_bits_2of3(ctx: RandomnessCtx, shape, kind: str = "rand-bits") -> BitShare:
    return BitShare(ctx.party, ctx.bits(ctx.party, kind, shape), ctx.bits((ctx.party + 1) % 3, kind, shape))


# --------------------------------------------------------------------------
# interactive operations


def reshare(party, z: np.ndarray, tag: str = "reshare") -> RssShare:
    """Turn 3-of-3 additive components into RSS: P_i sends z_i to P_{i-1}."""
    party.net.send_ring(party.prev, tag, z)
    z_next = party.net.recv_ring(party.next, tag, np.shape(z))
    return RssShare(party.pid, party.ring.reduce(z), z_next, party.ring)


def local_product(x: RssShare, y: RssShare, op=None) -> np.ndarray:
    """x_i*y_i + x_i*y_{i+1} + x_{i+1}*y_i under a bilinear ``op`` (default elementwise)."""
    r = x.ring
    op = op or r.mul
    return r.add(r.add(op(x.lo, y.lo), op(x.lo, y.hi)), op(x.hi, y.lo))


def mul_shares(party, x: RssShare, y: RssShare) -> RssShare:
    """Elementwise product; one round, one word per element per party."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    with party.net.phase("mul"):
        z = party.ring.add(local_product(x, y), zero_randomness_3of3(party.rand, x.shape))
        return reshare(party, z)


def and_bitshares(party, x: BitShare, y: BitShare) -> BitShare:
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    with party.net.phase("and"):
        z = (x.lo & y.lo) ^ (x.lo & y.hi) ^ (x.hi & y.lo) ^ zero_bits_3of3(party.rand, x.shape)
        party.net.send_bits(party.prev, "reshare", z)
        z_next = party.net.recv_bits(party.next, "reshare", x.shape)
        return BitShare(party.pid, z.astype(np.uint8), z_next)


def share_input(party, owner: int, value, shape, kind: str = "input") -> RssShare:
    """The owner secret-shares a ring tensor it holds; one round.

    The owner's two components come from its pairwise keys, so only the third
    component x_{owner+2} = x - x_owner - x_{owner+1} travels to the other two.
    """
    r = party.ring
    shape = tuple(shape)
    with party.net.phase("input"):
        a, b, c = owner, (owner + 1) % 3, (owner + 2) % 3
        if party.pid == owner:
            ca = party.rand.words(a, kind, shape)
            cb = party.rand.words(b, kind, shape)
            cc = r.sub(r.sub(r.reduce(np.asarray(value).reshape(shape)), ca), cb)
            party.net.send_ring(b, "third", cc)
            party.net.send_ring(c, "third", cc)
            return RssShare(party.pid, ca, cb, r)
        cc = party.net.recv_ring(owner, "third", shape)
        if party.pid == b:  # holds (x_b, x_c)
            return RssShare(party.pid, party.rand.words(b, kind, shape), cc, r)
        return RssShare(party.pid, cc, party.rand.words(a, kind, shape), r)  # P_c: (x_c, x_a)


def open_shares(party, x: RssShare, tag: str = "open") -> np.ndarray:
    """Reveal to everyone: P_i sends x_{i+1} to P_{i-1}, which lacks it."""
    with party.net.phase("open"):
        party.net.send_ring(party.prev, tag, x.hi)
        missing = party.net.recv_ring(party.next, tag, x.shape)
        r = party.ring
        return r.add(r.add(x.lo, x.hi), missing)


def reveal_to(party, x: RssShare, target: int, tag: str = "reveal"):
    """Reveal only to ``target``; returns the value there and None elsewhere."""
    with party.net.phase("reveal"):
        sender = (target + 1) % 3  # holds x_{target+2}, the component the target lacks
        if party.pid == sender:
            party.net.send_ring(target, tag, x.hi)
        if party.pid == target:
            missing = party.net.recv_ring(sender, tag, x.shape)
            r = party.ring
            return r.add(r.add(x.lo, x.hi), missing)
        return None
