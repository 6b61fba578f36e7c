"""Model graphs: an ordered list of layers over a fixed input shape.

Parameters are plaintext float64 arrays; sharing happens at inference time.
Shapes exclude the batch dimension.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .linear import Geometry, conv_output_hw, output_shape


class ShapeError(ValueError):
    pass


@dataclass
class FC:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    kind = "fc"


@dataclass
class Conv:
    weight: np.ndarray  # (C_out, C_in, k, k)
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    kind = "conv"


@dataclass
class DWConv:
    weight: np.ndarray  # (C, 1, k, k)
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    kind = "dwconv"


@dataclass
class PWConv:
    weight: np.ndarray  # (C_out, C_in, 1, 1)
    bias: np.ndarray
    kind = "pwconv"
    stride = 1
    padding = 0


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5
    kind = "batchnorm"


@dataclass
class Sign:
    """Step activation; {0, 1} by default, {-1, +1} when ``pm`` is set."""

    pm: bool = False
    kind = "sign"


@dataclass
class ReLU:
    kind = "relu"


@dataclass
class MaxPool:
    k: int = 2
    stride: int = 2
    kind = "maxpool"


@dataclass
class FusedSignMaxPool:
    """maxpool(sign(x)) computed as sign(sign-window-sum - 1)."""

    k: int = 2
    stride: int = 2
    kind = "signpool"


@dataclass
class Flatten:
    kind = "flatten"


@dataclass
class Output:
    """Marks the revealed tensor; a no-op on values."""

    kind = "output"


LINEAR_TYPES = (FC, Conv, DWConv, PWConv)
LAYER_TYPES = {t.kind: t for t in (FC, Conv, DWConv, PWConv, BatchNorm, Sign, ReLU, MaxPool,
                                   FusedSignMaxPool, Flatten, Output)}


def geometry(layer) -> Geometry:
    return Geometry(layer.kind, layer.stride if layer.kind != "fc" else 1,
                    layer.padding if layer.kind != "fc" else 0)


def layer_equal(a, b) -> bool:
    if type(a) is not type(b):
        return False
    for f in fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
            if not np.array_equal(np.asarray(x), np.asarray(y)):
                return False
        elif x != y:
            return False
    return True


@dataclass
class ModelGraph:
    input_shape: tuple
    layers: list = field(default_factory=list)
    l: int = 32
    f: int = 13
    d: int = 8

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)

    def copy(self) -> "ModelGraph":
        return ModelGraph(self.input_shape, [_copy_layer(x) for x in self.layers], self.l, self.f, self.d)

    def __eq__(self, other) -> bool:
        return (isinstance(other, ModelGraph) and self.input_shape == other.input_shape
                and (self.l, self.f, self.d) == (other.l, other.f, other.d)
                and len(self.layers) == len(other.layers)
                and all(layer_equal(a, b) for a, b in zip(self.layers, other.layers)))

    def shapes(self) -> list[tuple]:
        """Output shape after each layer; raises ShapeError on inconsistency."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            try:
                shape = layer_output_shape(layer, shape)
            except (ValueError, IndexError) as e:
                raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
            out.append(shape)
        return out

    @property
    def output_shape(self) -> tuple:
        s = self.shapes()
        return s[-1] if s else self.input_shape

    def kinds(self) -> list[str]:
        return [x.kind for x in self.layers]


def _copy_layer(layer):
    kw = {f.name: (np.array(getattr(layer, f.name)) if isinstance(getattr(layer, f.name), np.ndarray)
                   else getattr(layer, f.name)) for f in fields(layer)}
    return replace(layer, **kw)


def layer_output_shape(layer, shape: tuple) -> tuple:
    kind = layer.kind
    if kind in ("fc", "conv", "dwconv", "pwconv"):
        w = np.asarray(layer.weight)
        if kind == "fc":
            if len(shape) != 1 or w.ndim != 2 or w.shape[1] != shape[0]:
                raise ValueError(f"fc weight {w.shape} does not accept input {shape}")
        else:
            if len(shape) != 3 or w.ndim != 4:
                raise ValueError(f"{kind} needs a (C,H,W) input, got {shape}")
            if kind == "dwconv" and (w.shape[0] != shape[0] or w.shape[1] != 1):
                raise ValueError(f"depthwise weight {w.shape} vs {shape[0]} channels")
            if kind in ("conv", "pwconv") and w.shape[1] != shape[0]:
                raise ValueError(f"weight expects {w.shape[1]} channels, input has {shape[0]}")
            if kind == "pwconv" and w.shape[2:] != (1, 1):
                raise ValueError("pointwise kernels are 1x1")
        out = output_shape(geometry(layer), shape, w.shape)
        if np.asarray(layer.bias).shape != (out[0],):
            raise ValueError(f"bias shape {np.asarray(layer.bias).shape}, expected ({out[0]},)")
        return out
    if kind == "batchnorm":
        c = shape[0]
        for name in ("gamma", "beta", "mean", "var"):
            if np.asarray(getattr(layer, name)).shape != (c,):
                raise ValueError(f"batchnorm {name} must have {c} entries")
        if np.any(np.asarray(layer.var) < 0) or layer.eps <= 0:
            raise ValueError("batchnorm needs var >= 0 and eps > 0")
        return shape
    if kind in ("sign", "relu", "output"):
        return shape
    if kind in ("maxpool", "signpool"):
        if len(shape) != 3:
            raise ValueError(f"pooling needs a (C,H,W) input, got {shape}")
        ho, wo = conv_output_hw(shape[1], shape[2], layer.k, layer.stride, 0)
        return (shape[0], ho, wo)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    raise ValueError(f"unknown layer kind {kind!r}")


def parameter_count(graph_or_layers, include_bias: bool = False) -> int:
    layers = graph_or_layers.layers if isinstance(graph_or_layers, ModelGraph) else graph_or_layers
    n = 0
    for layer in layers:
        if isinstance(layer, LINEAR_TYPES):
            n += np.asarray(layer.weight).size + (np.asarray(layer.bias).size if include_bias else 0)
    return n
