"""Graph rewrites for secure inference and the compiled execution plan.

``rewrite_graph`` folds batch normalization, turns {-1,+1} Sign layers into
{0,1} ones, and merges Sign -> MaxPool pairs.  ``compile`` then encodes the
parameters, places truncations, bounds every intermediate value with
interval arithmetic and attaches the analytic communication cost of each step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linear import Geometry
from .model import (LINEAR_TYPES, BatchNorm, Conv, DWConv, Flatten, FusedSignMaxPool, MaxPool,
                    ModelGraph, Output, PWConv, ReLU, Sign, _copy_layer, geometry, parameter_count)
from .nonlinear import msb_budget
from .ring import FixedPoint

DEFAULT_SEPARABLE_THRESHOLD = 16


class CompileError(ValueError):
    pass


class RangeBudgetError(CompileError):
    def __init__(self, layer: int, kind: str, what: str, bound: int, limit: int):
        self.layer, self.kind, self.bound, self.limit = layer, kind, bound, limit
        super().__init__(f"layer {layer} ({kind}): {what} may reach {bound}, limit is < {limit}")


# --------------------------------------------------------------------------
# batch-norm folding


def bn_affine(bn: BatchNorm) -> tuple[np.ndarray, np.ndarray]:
    """(gamma', beta') with BN(x) = gamma' * x + beta'."""
    gamma = np.asarray(bn.gamma, dtype=np.float64)
    var = np.asarray(bn.var, dtype=np.float64)
    if np.any(var < 0) or bn.eps <= 0:
        raise CompileError("batchnorm needs var >= 0 and eps > 0")
    g = gamma / np.sqrt(var + bn.eps)
    return g, np.asarray(bn.beta, dtype=np.float64) - g * np.asarray(bn.mean, dtype=np.float64)


def fuse_bn_sign(bn: BatchNorm) -> np.ndarray:
    """Threshold t with Sign(BN(x)) = Sign(x + t); requires gamma > 0 per channel."""
    bad = np.flatnonzero(~(np.asarray(bn.gamma, dtype=np.float64) > 0))
    if bad.size:
        raise CompileError(f"batchnorm gamma must be positive before Sign; channel {int(bad[0])} "
                           f"has gamma={float(np.asarray(bn.gamma)[bad[0]])}")
    g, b = bn_affine(bn)
    return b / g


def fuse_bn_relu(weight: np.ndarray, bias: np.ndarray, bn: BatchNorm) -> tuple[np.ndarray, np.ndarray]:
    """Fold BN into the preceding layer: W * g, beta + (b - mu) * g per output channel."""
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    c = weight.shape[0]
    if bias.shape != (c,) or any(np.asarray(getattr(bn, n)).shape != (c,)
                                 for n in ("gamma", "beta", "mean", "var")):
        raise CompileError(f"batchnorm parameters do not match {c} output channels")
    g = np.asarray(bn.gamma, dtype=np.float64) / np.sqrt(np.asarray(bn.var, dtype=np.float64) + bn.eps)
    w = weight * g.reshape((c,) + (1,) * (weight.ndim - 1))
    b = np.asarray(bn.beta, dtype=np.float64) + (bias - np.asarray(bn.mean, dtype=np.float64)) * g
    return w, b


# --------------------------------------------------------------------------
# separable substitution


def substitute_separable(conv, threshold: int = DEFAULT_SEPARABLE_THRESHOLD, init: str = "random",
                         rng: np.random.Generator | None = None) -> list:
    """Replace a k x k conv with C_in >= threshold by depthwise + pointwise.

    The new parameters are fresh: ``init="random"`` draws He-scaled normals,
    ``init="identity"`` uses a centre-tap depthwise kernel and, when channel
    counts allow, an identity pointwise map.  The conv bias moves to the
    pointwise layer.
    """
    if not isinstance(conv, Conv):
        return [conv]
    c_out, c_in, k, _ = np.asarray(conv.weight).shape
    if c_in < threshold or k == 1:
        return [conv]
    rng = rng if rng is not None else np.random.default_rng(0)
    if init == "identity":
        dw = np.zeros((c_in, 1, k, k))
        dw[:, 0, k // 2, k // 2] = 1.0
        pw = np.zeros((c_out, c_in, 1, 1))
        idx = np.arange(min(c_in, c_out))
        pw[idx, idx, 0, 0] = 1.0
    elif init == "random":
        dw = rng.normal(0.0, math.sqrt(2.0 / (k * k)), (c_in, 1, k, k))
        pw = rng.normal(0.0, math.sqrt(2.0 / c_in), (c_out, c_in, 1, 1))
    else:
        raise ValueError(f"unknown init {init!r}")
    return [DWConv(dw, np.zeros(c_in), conv.stride, conv.padding),
            PWConv(pw, np.array(conv.bias, dtype=np.float64))]


def substitute_separable_graph(graph: ModelGraph, threshold: int = DEFAULT_SEPARABLE_THRESHOLD,
                               init: str = "random", seed: int = 0) -> ModelGraph:
    rng = np.random.default_rng(seed)
    layers = []
    for layer in graph.layers:
        layers.extend(substitute_separable(layer, threshold, init, rng))
    out = ModelGraph(graph.input_shape, layers, graph.l, graph.f, graph.d)
    out.shapes()
    return out


# --------------------------------------------------------------------------
# rewrites


def _fold_batchnorms(layers: list) -> list:
    out: list = []
    for i, layer in enumerate(layers):
        if not isinstance(layer, BatchNorm):
            out.append(layer)
            continue
        prev = out[-1] if out else None
        if not isinstance(prev, LINEAR_TYPES):
            raise CompileError(f"layer {i} (batchnorm) must directly follow a linear layer")
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        if isinstance(nxt, (Sign, FusedSignMaxPool)):
            try:
                t = fuse_bn_sign(layer)
            except CompileError as e:
                raise CompileError(f"layer {i}: {e}") from None
            prev.bias = np.asarray(prev.bias, dtype=np.float64) + t
        else:
            prev.weight, prev.bias = fuse_bn_relu(prev.weight, prev.bias, layer)
    return out


def _absorb_pm(layers: list) -> list:
    """Sign in {-1,+1} is 2s - 1 for s in {0,1}; fold the affine map forward."""
    for i, layer in enumerate(layers):
        if not (isinstance(layer, Sign) and layer.pm):
            continue
        j = i + 1
        while j < len(layers) and isinstance(layers[j], (MaxPool, Flatten)):
            j += 1
        if j == len(layers) or not isinstance(layers[j], LINEAR_TYPES):
            raise CompileError(f"layer {i}: a +-1 Sign must feed a linear layer (through pooling "
                               "or flatten only)")
        nxt = layers[j]
        if getattr(nxt, "padding", 0):
            raise CompileError(f"layer {j}: zero padding after a +-1 Sign has no {{0,1}} equivalent")
        w = np.asarray(nxt.weight, dtype=np.float64)
        nxt.bias = np.asarray(nxt.bias, dtype=np.float64) - w.reshape(w.shape[0], -1).sum(axis=1)
        nxt.weight = 2.0 * w
        layers[i] = Sign(pm=False)
    return layers


def _fuse_pools(layers: list) -> list:
    out: list = []
    for layer in layers:
        if isinstance(layer, MaxPool) and out and isinstance(out[-1], Sign) and not out[-1].pm:
            out[-1] = FusedSignMaxPool(layer.k, layer.stride)
        else:
            out.append(layer)
    return out


def rewrite_graph(graph: ModelGraph) -> ModelGraph:
    """BN folding, {-1,+1} -> {0,1} Sign, Sign/MaxPool fusion.  Idempotent."""
    graph.shapes()
    for i, layer in enumerate(graph.layers[:-1]):
        if isinstance(layer, Output):
            raise CompileError(f"layer {i}: output marker must be the last layer")
    layers = [_copy_layer(x) for x in graph.layers]
    layers = _fold_batchnorms(layers)
    layers = _absorb_pm(layers)
    layers = _fuse_pools(layers)
    out = ModelGraph(graph.input_shape, layers, graph.l, graph.f, graph.d)
    out.shapes()
    return out


# --------------------------------------------------------------------------
# analytic cost model


@dataclass(frozen=True)
class Cost:
    rounds: int = 0
    bytes: tuple = (0, 0, 0)

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(self.rounds + other.rounds, tuple(a + b for a, b in zip(self.bytes, other.bytes)))

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes)


def _words(rounds: int, per_party: tuple, n: int, w: int) -> Cost:
    return Cost(rounds, tuple(int(k) * n * w for k in per_party))


def cost_linear(n: int, w: int) -> Cost:
    return _words(1, (1, 1, 1), n, w)


def cost_trunc(n: int, w: int) -> Cost:
    return _words(2, (1, 1, 0), n, w)


def cost_msb(n: int, w: int) -> Cost:
    # b2a dual OT (P1 sends two pairs, P0 and P2 forward one word each),
    # the x*r reshare riding in the first leg, the mul reshare, the opening
    return _words(4, (4, 7, 4), n, w)


def cost_sign_act(n: int, w: int) -> Cost:
    return _words(2, (1, 4, 1), n, w)


def cost_relu_act(n: int, w: int) -> Cost:
    return _words(5, (3, 3, 3), n, w)


def cost_sign(n: int, w: int) -> Cost:
    return cost_msb(n, w) + cost_sign_act(n, w)


def cost_relu(n: int, w: int) -> Cost:
    return cost_msb(n, w) + cost_relu_act(n, w)


def cost_maxpool(n: int, window: int, w: int) -> Cost:
    total = Cost()
    m = window
    while m > 1:
        half = m // 2
        total = total + cost_relu(half * n, w)
        m = half + m % 2
    return total


def cost_share_input(n: int, w: int, owner: int) -> Cost:
    b = [0, 0, 0]
    b[owner] = 2 * n * w
    return Cost(1, tuple(b))


def cost_reveal(n: int, w: int, reveal_all: bool) -> Cost:
    if reveal_all:
        return _words(1, (1, 1, 1), n, w)
    return _words(1, (0, 1, 0), n, w)


# --------------------------------------------------------------------------
# plan


@dataclass
class Step:
    op: str  # linear | trunc | sign | relu | signpool | maxpool | flatten
    layer: int
    in_shape: tuple
    out_shape: tuple
    scale: int  # fixed-point scale of the output
    bound: int  # bound on |raw output|, inclusive
    geometry: Geometry | None = None
    weight: np.ndarray | None = None  # ring words at scale f
    bias: np.ndarray | None = None  # ring words at the output scale
    k: int = 0
    stride: int = 0
    trunc_bits: int | None = None

    @property
    def phase(self) -> str:
        return f"step{self.layer}.{self.op}"

    def cost(self, batch: int, w: int) -> Cost:
        n = batch * int(np.prod(self.out_shape))
        if self.op == "linear":
            return cost_linear(n, w)
        if self.op == "trunc":
            return cost_trunc(n, w)
        if self.op in ("sign", "signpool"):
            return cost_sign(n, w)
        if self.op == "relu":
            return cost_relu(n, w)
        if self.op == "maxpool":
            return cost_maxpool(n, self.k * self.k, w)
        return Cost()

    def same_as(self, other: "Step") -> bool:
        for name in ("op", "layer", "in_shape", "out_shape", "scale", "bound", "geometry", "k",
                     "stride", "trunc_bits"):
            if getattr(self, name) != getattr(other, name):
                return False
        for name in ("weight", "bias"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False
        return True


@dataclass
class CompiledPlan:
    graph: ModelGraph
    steps: list[Step]
    d: int
    input_bound: float
    out_scale: int
    meta: dict = field(default_factory=dict)

    @property
    def codec(self) -> FixedPoint:
        return FixedPoint(self.graph.l, self.graph.f)

    @property
    def input_shape(self) -> tuple:
        return self.graph.input_shape

    @property
    def out_shape(self) -> tuple:
        return self.steps[-1].out_shape if self.steps else self.graph.input_shape

    @property
    def linear_steps(self) -> list[Step]:
        return [s for s in self.steps if s.op == "linear"]

    def param_words(self) -> int:
        return sum(s.weight.size + s.bias.size for s in self.linear_steps)

    def cost(self, batch: int = 1, reveal_all: bool = False) -> dict[str, Cost]:
        """Analytic cost per top-level phase of one secure inference (setup excluded)."""
        w = self.codec.ring.word_bytes
        out: dict[str, Cost] = {}
        if self.linear_steps:
            out["weights"] = cost_share_input(self.param_words(), w, 1)
        out["input"] = cost_share_input(batch * int(np.prod(self.input_shape)), w, 0)
        for s in self.steps:
            out[s.phase] = s.cost(batch, w)
        out["output"] = cost_reveal(batch * int(np.prod(self.out_shape)), w, reveal_all)
        return out

    def total_cost(self, batch: int = 1, reveal_all: bool = False) -> Cost:
        total = Cost()
        for c in self.cost(batch, reveal_all).values():
            total = total + c
        return total

    def __eq__(self, other) -> bool:
        return (isinstance(other, CompiledPlan) and self.graph == other.graph and self.d == other.d
                and self.input_bound == other.input_bound and self.out_scale == other.out_scale
                and len(self.steps) == len(other.steps)
                and all(a.same_as(b) for a, b in zip(self.steps, other.steps)))


def _linear_bound(layer, w_raw: np.ndarray, b_raw: np.ndarray, in_bound: int) -> int:
    a = np.abs(w_raw).astype(object)
    per_out = a.reshape(a.shape[0], -1).sum(axis=1)
    return int(max(int(p) * in_bound + abs(int(b)) for p, b in zip(per_out, b_raw)))


def _next_consumer(layers: list, i: int):
    j = i + 1
    while j < len(layers) and isinstance(layers[j], (Flatten, Output)):
        j += 1
    return layers[j] if j < len(layers) else None


def compile(graph, d: int | None = None, input_bound: float = 1.0,
            separable_threshold: int | None = None, separable_init: str = "random",
            seed: int = 0) -> CompiledPlan:
    """Rewrite ``graph`` and build its execution plan.

    Accepts a ModelGraph or an earlier CompiledPlan (recompiling is a no-op).
    Truncation follows every multiplying layer at scale above f unless the
    value goes straight into Sign and already fits the MSB budget.  Raises
    RangeBudgetError naming the first layer whose worst-case magnitude
    breaks a no-wrap condition.
    """
    if isinstance(graph, CompiledPlan):
        if d is None:
            d = graph.d
        input_bound = graph.input_bound
        graph = graph.graph
    if separable_threshold is not None:
        graph = substitute_separable_graph(graph, separable_threshold, separable_init, seed)
    d = graph.d if d is None else d
    graph = rewrite_graph(graph)
    graph.d = d
    codec = FixedPoint(graph.l, graph.f)
    ring = codec.ring
    l, f = graph.l, graph.f
    budget = msb_budget(l, d)
    wrap = 1 << (l - 1)

    steps: list[Step] = []
    shape = graph.input_shape
    scale = f
    bound = int(math.ceil(input_bound * (1 << f)))
    layers = graph.layers
    shapes = graph.shapes()

    for i, layer in enumerate(layers):
        kind = layer.kind
        if isinstance(layer, LINEAR_TYPES):
            geo = geometry(layer)
            out_scale = scale + f
            try:
                w_enc = codec.encode(np.asarray(layer.weight, dtype=np.float64), f)
                b_enc = codec.encode(np.asarray(layer.bias, dtype=np.float64), out_scale)
            except OverflowError as e:
                raise CompileError(f"layer {i} ({kind}): parameters do not fit the ring: {e}") from None
            w_s, b_s = ring.signed(w_enc), ring.signed(b_enc)
            out_bound = _linear_bound(layer, w_s, b_s, bound)
            if out_bound >= wrap:
                raise RangeBudgetError(i, kind, "linear output", out_bound, wrap)
            new_shape = shapes[i]
            steps.append(Step("linear", i, shape, new_shape, out_scale, out_bound, geo, w_enc, b_enc))
            shape, scale, bound = new_shape, out_scale, out_bound
            if scale > f:
                consumer = _next_consumer(layers, i)
                feeds_sign = isinstance(consumer, (Sign, FusedSignMaxPool))
                if consumer is None and bound < wrap:
                    continue
                if feeds_sign and bound < budget:
                    continue
                limit = 1 << (l - 2)
                if bound >= limit:
                    raise RangeBudgetError(i, kind, "value before truncation", bound, limit)
                bits = max(bound.bit_length(), f)
                scale -= f
                bound = (bound >> f) + 2
                steps.append(Step("trunc", i, shape, shape, scale, bound, trunc_bits=bits))
        elif isinstance(layer, Sign):
            if bound >= budget:
                raise RangeBudgetError(i, kind, "Sign input", bound, budget)
            steps.append(Step("sign", i, shape, shape, 0, 1))
            scale, bound = 0, 1
        elif isinstance(layer, FusedSignMaxPool):
            if bound >= budget:
                raise RangeBudgetError(i, kind, "Sign input", bound, budget)
            steps.append(Step("sign", i, shape, shape, 0, 1))
            new_shape = shapes[i]
            if layer.k * layer.k > budget:
                raise RangeBudgetError(i, kind, "window sum", layer.k * layer.k, budget)
            steps.append(Step("signpool", i, shape, new_shape, 0, 1, k=layer.k, stride=layer.stride))
            shape, scale, bound = new_shape, 0, 1
        elif isinstance(layer, ReLU):
            if bound >= budget:
                raise RangeBudgetError(i, kind, "ReLU input", bound, budget)
            steps.append(Step("relu", i, shape, shape, scale, bound))
        elif isinstance(layer, MaxPool):
            if 2 * bound >= budget:
                raise RangeBudgetError(i, kind, "pairwise difference", 2 * bound, budget)
            new_shape = shapes[i]
            steps.append(Step("maxpool", i, shape, new_shape, scale, bound, k=layer.k, stride=layer.stride))
            shape = new_shape
        elif isinstance(layer, Flatten):
            new_shape = shapes[i]
            steps.append(Step("flatten", i, shape, new_shape, scale, bound))
            shape = new_shape
        elif isinstance(layer, Output):
            continue
        else:
            raise CompileError(f"layer {i}: cannot compile {kind!r}")

    meta = {"params": parameter_count(graph), "budget": budget}
    return CompiledPlan(graph, steps, d, input_bound, scale, meta)


compile_model = compile
