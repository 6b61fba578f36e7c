"""Plaintext references: real and fixed-point forward passes, softmax and losses.

The fixed-point pass replays a compiled plan with plain ring arithmetic; it
is what the secure engine must reproduce, except that secure truncation may
land one unit below the floor used here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compiler import CompiledPlan, Step, bn_affine, compile
from .linear import broadcast_bias, im2col, linear_apply
from .model import LINEAR_TYPES, ModelGraph, geometry
from .ring import Ring


@dataclass(frozen=True)
class DistillConfig:
    T: float = 10.0
    lam: float = 0.1

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


def softmax_T(z, T: float = 1.0, axis: int = -1) -> np.ndarray:
    if not T > 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(z, dtype=np.float64) / T
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax_T(z, T: float = 1.0, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64) / T
    m = np.max(z, axis=axis, keepdims=True)
    return z - m - np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))


def cross_entropy(p, q, axis: int = -1) -> np.ndarray:
    """H(p, q) = -sum p log q; raises when q is 0 where p is not."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any((q <= 0) & (p > 0)):
        raise ValueError("cross entropy undefined: q_i = 0 where p_i > 0")
    logq = np.log(np.where(p > 0, q, 1.0))
    return -np.sum(p * logq, axis=axis)


def kd_loss(student_logits, teacher_logits, label, cfg: DistillConfig) -> np.ndarray:
    """lam * H(onehot, q) + (1 - lam) * H(p^T, q^T), teacher as the target.

    Works on single vectors or batches (last axis = classes); computed in
    the log domain so large logits stay finite.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"student {s.shape} and teacher {t.shape} logits differ in shape")
    label = np.asarray(label)
    hard = -np.take_along_axis(log_softmax_T(s, 1.0), label[..., None], axis=-1)[..., 0]
    if cfg.lam == 1.0:
        return hard
    soft = -np.sum(softmax_T(t, cfg.T) * log_softmax_T(s, cfg.T), axis=-1)
    return cfg.lam * hard + (1.0 - cfg.lam) * soft


# --------------------------------------------------------------------------
# forward passes


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    return im2col(x, k, stride, 0)


def real_layer(layer, x: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if isinstance(layer, LINEAR_TYPES):
        geo = geometry(layer)
        y = linear_apply(geo, x, np.asarray(layer.weight, dtype=np.float64))
        return y + broadcast_bias(geo, np.asarray(layer.bias, dtype=np.float64), y.shape)
    if kind == "batchnorm":
        g, b = bn_affine(layer)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return x * g.reshape(shape) + b.reshape(shape)
    if kind == "sign":
        s = (x >= 0).astype(np.float64)
        return 2.0 * s - 1.0 if layer.pm else s
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "maxpool":
        return _windows(x, layer.k, layer.stride).max(axis=-1)
    if kind == "signpool":
        return _windows((x >= 0).astype(np.float64), layer.k, layer.stride).max(axis=-1)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "output":
        return x
    raise ValueError(f"unknown layer kind {kind!r}")


def real_forward(graph: ModelGraph, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != graph.input_shape:
        raise ValueError(f"input batch {x.shape} does not match model input {graph.input_shape}")
    for layer in graph.layers:
        x = real_layer(layer, x)
    return x


def fixedpoint_step(step: Step, x: np.ndarray, ring: Ring, f: int) -> np.ndarray:
    """One plan step on raw ring words; truncation is the exact floor."""
    op = step.op
    if op == "linear":
        y = linear_apply(step.geometry, x, step.weight, ring)
        return ring.add(y, broadcast_bias(step.geometry, step.bias, y.shape))
    if op == "trunc":
        return ring.from_signed(ring.signed(x) >> f)
    if op == "sign":
        return (ring.signed(x) >= 0).astype(np.uint64)
    if op == "relu":
        return np.where(ring.signed(x) >= 0, x, np.uint64(0))
    if op == "signpool":
        s = ring.signed(_windows(x, step.k, step.stride)).sum(axis=-1) - 1
        return (s >= 0).astype(np.uint64)
    if op == "maxpool":
        return ring.from_signed(ring.signed(_windows(x, step.k, step.stride)).max(axis=-1))
    if op == "flatten":
        return x.reshape(x.shape[0], -1)
    raise ValueError(f"unknown step {op!r}")


def fixedpoint_forward(plan: CompiledPlan, x, trace: bool = False):
    """Raw ring output of the plan (and the per-step trace when asked)."""
    codec = plan.codec
    ring = codec.ring
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != plan.input_shape:
        raise ValueError(f"input batch {x.shape} does not match model input {plan.input_shape}")
    raw = codec.encode(x)
    steps_out = []
    for step in plan.steps:
        raw = fixedpoint_step(step, raw, ring, codec.f)
        steps_out.append(raw)
    return (raw, steps_out) if trace else raw


def plaintext_forward(model, x, mode: str = "real") -> np.ndarray:
    """Decoded model output for a batch ``x`` in real or fixed-point arithmetic.

    ``model`` is a ModelGraph or a CompiledPlan; fixed-point mode compiles a
    graph first.
    """
    if mode == "real":
        graph = model.graph if isinstance(model, CompiledPlan) else model
        return real_forward(graph, x)
    if mode == "fixedpoint":
        plan = model if isinstance(model, CompiledPlan) else compile(model)
        raw = fixedpoint_forward(plan, x)
        return plan.codec.decode(raw, plan.out_scale)
    raise ValueError(f"mode must be 'real' or 'fixedpoint', got {mode!r}")
