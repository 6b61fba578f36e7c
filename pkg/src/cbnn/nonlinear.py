"""Secure activations: bit-to-arithmetic conversion, MSB extraction, Sign, ReLU,
and the Sign-fused max pooling.

Party roles: P_0 data owner, P_1 model owner, P_2 helper.  Sign outputs the
{0, 1} step (1 for non-negative inputs).
"""
from __future__ import annotations

import numpy as np

from .linear import im2col
from .ot import OtInstance, ot3_parallel
from .sharing import (BitShare, RssShare, local_product, open_shares, mul_shares, reshare,
                      zero_randomness_3of3)

DEFAULT_MSB_BITS = 8


def msb_budget(l: int, d: int = DEFAULT_MSB_BITS) -> int:
    """Exclusive bound on |x| for which msb_extract is exact."""
    return 1 << (l - 1 - d)


def _b2a_instances(party, bits: BitShare, invert: bool, kind: str, shape):
    """Dual OT: P_1 sends, P_0 and P_2 (both holding x_0^B) each receive m_c."""
    ring = party.ring
    pid = party.pid
    m0 = m1 = None
    if pid == 1:
        mask1 = party.rand.pair_words(0, kind, shape)  # x_1, shared with P_0
        mask2 = party.rand.pair_words(2, kind, shape)  # x_2, shared with P_2
        known = (bits.lo ^ bits.hi ^ (1 if invert else 0)).astype(np.uint64)
        masks = ring.add(mask1, mask2)
        m0 = ring.sub(known, masks)
        m1 = ring.sub(known ^ np.uint64(1), masks)
        keep = (mask1, mask2)
    elif pid == 0:
        keep = party.rand.pair_words(1, kind, shape)
    else:
        keep = party.rand.pair_words(1, kind, shape)
    choice = None
    if pid == 0:
        choice = bits.lo
    elif pid == 2:
        choice = bits.hi
    insts = [OtInstance(1, 0, 2, shape, m0, m1, choice, "b2a-a"),
             OtInstance(1, 2, 0, shape, m0, m1, choice, "b2a-b")]
    return insts, keep


def _b2a_assemble(party, out, keep) -> RssShare:
    ring = party.ring
    if party.pid == 0:
        return RssShare(0, out[0], keep, ring)
    if party.pid == 1:
        return RssShare(1, keep[0], keep[1], ring)
    return RssShare(2, keep, out[1], ring)


def b2a_convert(party, x: BitShare, invert: bool = False, alongside=None) -> RssShare:
    """Bit shares -> arithmetic shares of the same bit (or its complement).

    P_1 knows x_1^B and x_2^B and offers m_i = (i ^ x_1^B ^ x_2^B) - x_1 - x_2,
    with x_1, x_2 drawn from its pairwise keys; P_0 and P_2 pick with x_0^B.
    Two OTs run in the same two legs so that both P_0 and P_2 learn the third
    component x_0.  Two rounds.
    """
    insts, keep = _b2a_instances(party, x, invert, "b2a", x.shape)
    out = ot3_parallel(party, insts, alongside=alongside, phase="b2a")
    return _b2a_assemble(party, out, keep)


def _bounded_rss(party, shape, nbits: int, kind: str) -> RssShare:
    """RSS of 1 + r_0 + r_1 + r_2 with each r_j uniform in [0, 2^nbits)."""
    ctx = party.rand
    lo = ctx.bounded(party.pid, kind, shape, nbits)
    hi = ctx.bounded(party.next, kind, shape, nbits)
    return RssShare(party.pid, lo, hi, party.ring).add_const(np.uint64(1))


def msb_extract(party, x: RssShare, d: int = DEFAULT_MSB_BITS) -> BitShare:
    """Shares of the sign bit of x via multiplicative masking; four rounds.

    u = (1 - 2*beta) * (2x + 1) * r is opened; for |x| < 2^(l-1-d) and
    1 <= r < 2^(d-1) the product cannot wrap, so msb(u) = msb(x) ^ beta.
    Using 2x + 1 keeps u away from zero so x = 0 maps to msb 0.
    """
    if d < 3:
        raise ValueError("mask width d must be at least 3")
    ring = party.ring
    shape = x.shape
    with party.net.phase("msb"):
        if party.inspector is not None:
            party.inspector.deposit(party, x, "msb-input", msb_budget(ring.l, d))
        beta = BitShare(party.pid, party.rand.bits(party.pid, "msb-beta", shape),
                        party.rand.bits(party.next, "msb-beta", shape))
        r = _bounded_rss(party, shape, d - 3, "msb-r")
        x2 = x.scale(2).add_const(np.uint64(1))
        xr: dict = {}

        def send():
            z = ring.add(local_product(x2, r), zero_randomness_3of3(party.rand, shape, "msb-zero"))
            xr["z"] = z
            party.net.send_ring(party.prev, "xr", z)

        def recv():
            xr["share"] = RssShare(party.pid, xr["z"], party.net.recv_ring(party.next, "xr", shape), ring)

        beta_a = b2a_convert(party, beta, alongside=(send, recv))
        sign = beta_a.scale(np.int64(-2)).add_const(np.uint64(1))
        u = open_shares(party, mul_shares(party, sign, xr["share"]))
        return BitShare(party.pid, beta.lo, beta.hi).xor_const(ring.msb(u))


def secure_sign(party, msb: BitShare) -> RssShare:
    """[1 ^ msb] as arithmetic shares; two rounds."""
    with party.net.phase("sign"):
        insts, keep = _b2a_instances(party, msb, True, "sign", msb.shape)
        out = ot3_parallel(party, insts)
        return _b2a_assemble(party, out, keep)


def secure_relu(party, x: RssShare, msb: BitShare) -> RssShare:
    """(1 ^ msb(x)) * x via two sequential OTs and a reshare; five rounds.

    First P_1 offers (1^i^MSB_1^MSB_2)*(x_1+x_2) - a_1 - a_2 to P_0 (choice
    MSB_0), then P_0 offers (1^i^MSB_0^MSB_1)*x_0 - g_0 - g_1 to P_1 (choice
    MSB_2), P_2 helping both times.  Additive components
    (A + g_0, B + a_1, a_2 + g_1) are then reshared.
    """
    ring = party.ring
    pid = party.pid
    shape = x.shape
    with party.net.phase("relu"):
        m0 = m1 = choice = None
        if pid == 1:
            a1 = party.rand.private_words("relu-a1", shape)
            a2 = party.rand.pair_words(2, "relu-a2", shape)
            base = (1 ^ msb.lo ^ msb.hi).astype(np.uint64)
            x12 = ring.add(x.lo, x.hi)
            m0 = ring.sub(ring.mul(base, x12), ring.add(a1, a2))
            m1 = ring.sub(ring.mul(base ^ np.uint64(1), x12), ring.add(a1, a2))
        elif pid == 0:
            choice = msb.lo
        else:
            choice = msb.hi
            a2 = party.rand.pair_words(1, "relu-a2", shape)
        got_a = ot3_parallel(party, [OtInstance(1, 0, 2, shape, m0, m1, choice, "relu1")])[0]

        m0 = m1 = choice = None
        if pid == 0:
            g0 = party.rand.private_words("relu-g0", shape)
            g1 = party.rand.pair_words(2, "relu-g1", shape)
            base = (1 ^ msb.lo ^ msb.hi).astype(np.uint64)
            m0 = ring.sub(ring.mul(base, x.lo), ring.add(g0, g1))
            m1 = ring.sub(ring.mul(base ^ np.uint64(1), x.lo), ring.add(g0, g1))
        elif pid == 1:
            choice = msb.hi
        else:
            choice = msb.lo
            g1 = party.rand.pair_words(0, "relu-g1", shape)
        got_b = ot3_parallel(party, [OtInstance(0, 1, 2, shape, m0, m1, choice, "relu2")])[0]

        if pid == 0:
            z = ring.add(got_a, g0)
        elif pid == 1:
            z = ring.add(got_b, a1)
        else:
            z = ring.add(a2, g1)
        with party.net.phase("reshare"):
            return reshare(party, z)


def relu(party, x: RssShare, d: int = DEFAULT_MSB_BITS) -> RssShare:
    return secure_relu(party, x, msb_extract(party, x, d))


def sign(party, x: RssShare, d: int = DEFAULT_MSB_BITS) -> RssShare:
    return secure_sign(party, msb_extract(party, x, d))


def window_view(x: RssShare, k: int, stride: int) -> RssShare:
    """(N, C, H, W) -> (N, C, Ho, Wo, k*k) pooling windows, locally."""
    return x.map(lambda a: im2col(a, k, stride, 0))


def fused_sign_maxpool(party, act: RssShare, k: int = 2, stride: int = 2,
                       d: int = DEFAULT_MSB_BITS) -> RssShare:
    """Max over windows of {0,1} activations: Sign(window sum - 1)."""
    with party.net.phase("signpool"):
        s = window_view(act, k, stride).sum(axis=-1).add_const(np.int64(-1))
        return sign(party, s, d)


def fused_sign_maxpool_windows(party, windows: list[RssShare], d: int = DEFAULT_MSB_BITS) -> RssShare:
    """Same as :func:`fused_sign_maxpool` for an explicit list of window members."""
    total = windows[0]
    for w in windows[1:]:
        total = total + w
    with party.net.phase("signpool"):
        return sign(party, total.add_const(np.int64(-1)), d)


def secure_max(party, a: RssShare, b: RssShare, d: int = DEFAULT_MSB_BITS) -> RssShare:
    """max(a, b) = b + relu(a - b)."""
    return b + relu(party, a - b, d)


def maxpool(party, x: RssShare, k: int = 2, stride: int = 2, d: int = DEFAULT_MSB_BITS) -> RssShare:
    """General max pooling by a tournament of secure_max; ceil(log2(k*k)) levels."""
    with party.net.phase("maxpool"):
        win = window_view(x, k, stride)
        items = [win.map(lambda a, j=j: a[..., j]) for j in range(k * k)]
        while len(items) > 1:
            half = len(items) // 2
            a = _stack([items[2 * j] for j in range(half)])
            b = _stack([items[2 * j + 1] for j in range(half)])
            m = secure_max(party, a, b, d)
            merged = [m.map(lambda v, j=j: v[j]) for j in range(half)]
            if len(items) % 2:
                merged.append(items[-1])
            items = merged
        return items[0]


def _stack(shares: list[RssShare]) -> RssShare:
    s = shares[0]
    return RssShare(s.party, np.stack([t.lo for t in shares]), np.stack([t.hi for t in shares]), s.ring)
