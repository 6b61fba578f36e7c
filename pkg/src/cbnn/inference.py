"""Secure three-party inference of a compiled plan.

P_1 (model owner) shares all encoded parameters once, P_0 (data owner)
shares the input batch, every plan step runs as its own phase, and the
output is reconstructed at P_0 only unless ``reveal_all`` is set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compiler import CompiledPlan, Step
from .debug import Inspector
from .linear import linear_infer, truncate
from .nonlinear import fused_sign_maxpool, maxpool, relu, sign
from .sharing import RssShare, open_shares, reveal_to, share_input
from .transport import DEFAULT_TIMEOUT, TrafficStats, run_three_parties

DATA_OWNER, MODEL_OWNER, HELPER = 0, 1, 2


def deal_parameters(party, plan: CompiledPlan) -> list[tuple[RssShare, RssShare]]:
    """Share every (weight, bias) pair in a single one-round message per party."""
    steps = plan.linear_steps
    sizes = []
    for s in steps:
        sizes += [s.weight.size, s.bias.size]
    total = sum(sizes)
    value = None
    if party.pid == MODEL_OWNER:
        value = np.concatenate([a.ravel() for s in steps for a in (s.weight, s.bias)])
    with party.net.phase("weights"):
        flat = share_input(party, MODEL_OWNER, value, (total,), kind="weights")
    out = []
    pos = 0
    for s in steps:
        w = flat.map(lambda a, p=pos, n=s.weight.size, sh=s.weight.shape: a[p:p + n].reshape(sh))
        pos += s.weight.size
        b = flat.map(lambda a, p=pos, n=s.bias.size: a[p:p + n])
        pos += s.bias.size
        out.append((w, b))
    return out


def run_step(party, step: Step, x: RssShare, params, d: int, f: int) -> RssShare:
    op = step.op
    with party.net.phase(step.phase):
        if op == "linear":
            w, b = params
            return linear_infer(party, step.geometry, w, b, x)
        if op == "trunc":
            return truncate(party, x, f, step.trunc_bits)
        if op == "sign":
            return sign(party, x, d)
        if op == "relu":
            return relu(party, x, d)
        if op == "signpool":
            return fused_sign_maxpool(party, x, step.k, step.stride, d)
        if op == "maxpool":
            return maxpool(party, x, step.k, step.stride, d)
        if op == "flatten":
            return x.reshape(x.shape[0], -1)
    raise ValueError(f"unknown step {op!r}")


def secure_program(plan: CompiledPlan, x=None, batch: int | None = None, reveal_all: bool = False):
    """Per-party program for :func:`run_three_parties`.

    ``x`` (real inputs, shape (N, *input_shape)) is read only at P_0; the
    batch size N is public.  P_0 returns the raw output words, the others
    None (all parties return them with ``reveal_all``).
    """
    codec = plan.codec
    if batch is None:
        if x is None:
            raise ValueError("batch size is needed when no input is given")
        batch = int(np.shape(x)[0])
    in_shape = (batch,) + tuple(plan.input_shape)
    d, f = plan.d, codec.f

    def program(party):
        params = deal_parameters(party, plan) if plan.linear_steps else []
        value = None
        if party.pid == DATA_OWNER:
            xs = np.asarray(x, dtype=np.float64)
            if xs.shape != in_shape:
                raise ValueError(f"input batch {xs.shape} does not match {in_shape}")
            value = codec.encode(xs)
        h = share_input(party, DATA_OWNER, value, in_shape)
        it = iter(params)
        for idx, step in enumerate(plan.steps):
            h = run_step(party, step, h, next(it) if step.op == "linear" else None, d, f)
            if party.inspector is not None:
                party.inspector.deposit(party, h, f"out{idx}")
        with party.net.phase("output"):
            if reveal_all:
                return open_shares(party, h)
            return reveal_to(party, h, DATA_OWNER)

    return program


@dataclass
class InferenceResult:
    raw: np.ndarray  # ring words at the output scale, as seen by P_0
    output: np.ndarray  # decoded
    stats: TrafficStats  # setup excluded
    full_stats: TrafficStats
    outputs: list  # every party's return value
    trace: list | None = None
    inspector: Inspector | None = None

    @property
    def argmax(self) -> np.ndarray:
        return np.argmax(self.output.reshape(self.output.shape[0], -1), axis=1)


def secure_inference(plan: CompiledPlan, x, mode: str = "inprocess", seed: int = 0,
                     reveal_all: bool = False, debug: bool = False,
                     timeout: float = DEFAULT_TIMEOUT) -> InferenceResult:
    """Run all three parties on ``x`` and collect P_0's output.

    With ``debug`` an Inspector records every step's reconstructed output
    (``trace``) and checks each MSB input against its budget.
    """
    inspector = Inspector(record=True) if debug else None
    res = run_three_parties(secure_program(plan, x, reveal_all=reveal_all), mode=mode, seed=seed,
                            codec=plan.codec, timeout=timeout, inspector=inspector)
    raw = res.outputs[DATA_OWNER]
    trace = None
    if inspector is not None:
        trace = [inspector.values[f":out{i}"] for i in range(len(plan.steps))]
    return InferenceResult(raw, plan.codec.decode(raw, plan.out_scale), res.stats.without("setup"),
                           res.stats, res.outputs, trace, inspector)


def measured_cost(stats: TrafficStats) -> dict:
    """Top-level phase costs keyed like :meth:`CompiledPlan.cost`."""
    out = {}
    for path, c in stats.top_level().items():
        name = path.rsplit("#", 1)[0]
        if name != "setup":
            out[name] = c
    return out
