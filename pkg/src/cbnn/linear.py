"""Secure linear layers (FC, convolution, depthwise/pointwise) and truncation.

Layouts: FC inputs are (N, in) with weights (out, in); convolution inputs
are channel-major (N, C, H, W) with weights (C_out, C_in, k, k); depthwise
weights are (C, 1, k, k).  The same kernels run on float arrays (real-mode
oracle) and on ring arrays, where all accumulation wraps modulo 2^l.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ring import Ring
from .sharing import RssShare, local_product, reshare, zero_randomness_3of3

LINEAR_KINDS = ("fc", "conv", "dwconv", "pwconv")


@dataclass(frozen=True)
class Geometry:
    kind: str
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LINEAR_KINDS:
            raise ValueError(f"unknown linear kind {self.kind!r}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")


def conv_output_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {k} does not fit a {h}x{w} input with padding {padding}")
    return ho, wo


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C, Ho, Wo, k*k) patches."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.reshape(n, c, ho, wo, k * k)


def _mm(a, b, ring: Ring | None):
    return np.matmul(a, b) if ring is None else ring.matmul(a, b)


def _ein(spec, a, b, ring: Ring | None):
    return np.einsum(spec, a, b) if ring is None else ring.einsum(spec, a, b)


def linear_apply(geo: Geometry, x: np.ndarray, w: np.ndarray, ring: Ring | None = None) -> np.ndarray:
    """Bilinear part of a layer (no bias); ring arithmetic when ``ring`` is given."""
    if geo.kind == "fc":
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ValueError(f"fc shape mismatch: input {x.shape}, weight {w.shape}")
        return _mm(x, w.T, ring)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"{geo.kind} expects (N,C,H,W) input and 4-d weights")
    k = w.shape[-1]
    if geo.kind == "pwconv" and k != 1:
        raise ValueError("pointwise convolution needs a 1x1 kernel")
    cols = im2col(x, k, geo.stride, geo.padding)
    if geo.kind == "dwconv":
        if w.shape[1] != 1 or w.shape[0] != x.shape[1]:
            raise ValueError(f"depthwise weight {w.shape} does not match {x.shape[1]} channels")
        return _ein("nchwk,ck->nchw", cols, w.reshape(w.shape[0], k * k), ring)
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"conv weight expects {w.shape[1]} input channels, got {x.shape[1]}")
    n, c, ho, wo, kk = cols.shape
    flat = cols.transpose(0, 2, 3, 1, 4).reshape(n, ho * wo, c * kk)
    out = _mm(flat, w.reshape(w.shape[0], -1).T, ring)
    return out.reshape(n, ho, wo, w.shape[0]).transpose(0, 3, 1, 2)


def broadcast_bias(geo: Geometry, b: np.ndarray, out_shape) -> np.ndarray:
    if geo.kind == "fc":
        return np.broadcast_to(b, out_shape)
    return np.broadcast_to(b.reshape(1, -1, 1, 1), out_shape)


def output_shape(geo: Geometry, in_shape, w_shape) -> tuple:
    """Shape of a layer's output for input ``in_shape`` (without batch)."""
    if geo.kind == "fc":
        return (w_shape[0],)
    c, h, w = in_shape
    ho, wo = conv_output_hw(h, w, w_shape[-1], geo.stride, geo.padding)
    return (c if geo.kind == "dwconv" else w_shape[0], ho, wo)


# --------------------------------------------------------------------------
# secure protocols


def linear_infer(party, geo: Geometry, w: RssShare, b: RssShare | None, x: RssShare) -> RssShare:
    """Z_i = op(X_i,W_i) + op(X_i,W_{i+1}) + op(X_{i+1},W_i) + b_i + a_i, then reshare.

    One round; the output is at the product scale of the operands.
    """
    ring = party.ring
    with party.net.phase("linear"):
        z = local_product(x, w, lambda a, c: linear_apply(geo, a, c, ring))
        if b is not None:
            z = ring.add(z, broadcast_bias(geo, b.lo, z.shape))
        z = ring.add(z, zero_randomness_3of3(party.rand, z.shape))
        return reshare(party, z)


def conv2d_infer(party, w: RssShare, b: RssShare | None, x: RssShare, stride: int = 1,
                 padding: int = 0) -> RssShare:
    return linear_infer(party, Geometry("conv", stride, padding), w, b, x)


def separable_conv_infer(party, dw: tuple, pw: tuple, x: RssShare, f: int | None = None) -> RssShare:
    """Depthwise then pointwise convolution: two linear rounds.

    ``dw`` and ``pw`` are (weight, bias, stride, padding) tuples.  When ``f`` is
    given, the depthwise output is truncated before the pointwise stage.
    """
    dw_w, dw_b, stride, padding = dw
    pw_w, pw_b = pw[0], pw[1]
    y = linear_infer(party, Geometry("dwconv", stride, padding), dw_w, dw_b, x)
    if f is not None:
        y = truncate(party, y, f)
    return linear_infer(party, Geometry("pwconv"), pw_w, pw_b, y)


def truncate(party, x: RssShare, f: int, bound_bits: int | None = None) -> RssShare:
    """Divide a shared value by 2^f, result within one unit below the floor.

    Requires |x| < 2^bound_bits (default 2^(l-2)).  P_1 and P_2 derive a mask
    r from their common key, sized so x + 2^bound_bits + r never wraps; P_0
    learns c = x + 2^bound_bits + r and shares c >> f back, from which
    ceil(r / 2^f) and the offset are subtracted.  Two rounds.
    """
    ring = party.ring
    l = ring.l
    k = l - 2 if bound_bits is None else max(int(bound_bits), f)
    if k > l - 2:
        raise ValueError(f"truncation bound 2^{k} leaves no room for masking in Z_2^{l}")
    offset = 1 << k
    span = (1 << l) - (1 << (k + 1))  # r in [0, span): x' + r < 2^l
    pid = party.pid
    with party.net.phase("trunc"):
        x = x.add_const(np.uint64(offset))
        r_hi = None
        if pid in (1, 2):
            r = party.rand.words(2, "trunc-mask", x.shape) % np.uint64(span)
            r_hi = (r + np.uint64((1 << f) - 1)) >> np.uint64(f)
            const = ring.neg(ring.add(r_hi, np.uint64(offset >> f)))
        if pid == 1:
            party.net.send_ring(0, "masked", ring.add(x.hi, r))
        t_share0 = None
        if pid in (0, 2):
            t_share0 = party.rand.words(0, "trunc-out", x.shape)
        if pid == 0:
            masked = party.net.recv_ring(1, "masked", x.shape)
            c = ring.add(ring.add(x.lo, x.hi), masked)
            t = c >> np.uint64(f)
            y1 = ring.sub(t, t_share0)
            party.net.send_ring(1, "shifted", y1)
            return RssShare(0, t_share0, y1, ring)
        if pid == 1:
            y1 = party.net.recv_ring(0, "shifted", x.shape)
            return RssShare(1, y1, const, ring)
        return RssShare(2, const, t_share0, ring)
