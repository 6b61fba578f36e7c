"""Binary model files, input files and run reports.

Model file layout (all integers little-endian)::

    "CBNN"  u16 version  u8 l  u8 f  u8 d  u8 rank  u32 dims[rank]  u32 n_layers
    n_layers x record
    u32 crc32 of every preceding byte

    record: u8 kind  geometry  u8 n_tensors  n_tensors x tensor
    tensor: u8 encoding (0 real64, 1 raw ring)  u8 scale  u8 ndim  u32 dims[ndim]  payload

Raw ring payloads use ceil(l/8) bytes per value and decode as value / 2^scale.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import (FC, BatchNorm, Conv, DWConv, Flatten, FusedSignMaxPool, MaxPool, ModelGraph, Output,
                    PWConv, ReLU, Sign)
from .ring import FixedPoint

MAGIC = b"CBNN"
VERSION = 1
ENC_REAL64, ENC_RAW = 0, 1

KIND_TAGS = {"fc": 1, "conv": 2, "dwconv": 3, "pwconv": 4, "batchnorm": 5, "sign": 6, "relu": 7,
             "maxpool": 8, "signpool": 9, "flatten": 10, "output": 11}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


class ModelFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"byte {offset}: {message}")


# --------------------------------------------------------------------------
# writing


def _tensor_bytes(a: np.ndarray, raw: bool, scale: int, codec: FixedPoint) -> bytes:
    a = np.asarray(a, dtype=np.float64)
    head = struct.pack("<BBB", ENC_RAW if raw else ENC_REAL64, scale if raw else 0, a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    if raw:
        words = codec.encode(a, scale).astype("<u8")
        wb = codec.ring.word_bytes
        body = words.reshape(-1, 1).view(np.uint8)[:, :wb].tobytes()
    else:
        body = a.astype("<f8").tobytes()
    return head + body


def _layer_record(layer, raw: bool, codec: FixedPoint) -> bytes:
    kind = layer.kind
    out = struct.pack("<B", KIND_TAGS[kind])
    tensors: list[tuple[np.ndarray, int]] = []
    if kind in ("fc", "pwconv"):
        tensors = [(layer.weight, codec.f), (layer.bias, codec.f)]
    elif kind in ("conv", "dwconv"):
        out += struct.pack("<HH", layer.stride, layer.padding)
        tensors = [(layer.weight, codec.f), (layer.bias, codec.f)]
    elif kind == "batchnorm":
        out += struct.pack("<d", layer.eps)
        tensors = [(layer.gamma, codec.f), (layer.beta, codec.f), (layer.mean, codec.f), (layer.var, codec.f)]
    elif kind == "sign":
        out += struct.pack("<B", 1 if layer.pm else 0)
    elif kind in ("maxpool", "signpool"):
        out += struct.pack("<HH", layer.k, layer.stride)
    out += struct.pack("<B", len(tensors))
    for a, scale in tensors:
        out += _tensor_bytes(a, raw, scale, codec)
    return out


def dumps_model(graph: ModelGraph, raw: bool = False) -> bytes:
    """Serialize; ``raw`` stores parameters as ring words (lossy: quantized)."""
    graph.shapes()
    codec = FixedPoint(graph.l, graph.f)
    body = MAGIC + struct.pack("<HBBBB", VERSION, graph.l, graph.f, graph.d, len(graph.input_shape))
    body += struct.pack(f"<{len(graph.input_shape)}I", *graph.input_shape)
    body += struct.pack("<I", len(graph.layers))
    for layer in graph.layers:
        body += _layer_record(layer, raw, codec)
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(graph: ModelGraph, path, raw: bool = False) -> None:
    Path(path).write_bytes(dumps_model(graph, raw))


# --------------------------------------------------------------------------
# reading


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"file ends while reading {what} (need {n} bytes, "
                                   f"{len(self.data) - self.pos} left)", self.pos)
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size, what))


def _read_tensor(r: _Reader, codec: FixedPoint, what: str) -> np.ndarray:
    at = r.pos
    enc, scale, ndim = r.unpack("BBB", what + " header")
    if enc not in (ENC_REAL64, ENC_RAW):
        raise ModelFormatError(f"{what}: unknown encoding {enc}", at)
    dims = r.unpack(f"{ndim}I", what + " dims") if ndim else ()
    n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if enc == ENC_REAL64:
        a = np.frombuffer(r.take(8 * n, what + " payload"), dtype="<f8").astype(np.float64)
    else:
        wb = codec.ring.word_bytes
        b = np.frombuffer(r.take(wb * n, what + " payload"), dtype=np.uint8).reshape(n, wb)
        words = np.zeros((n, 8), dtype=np.uint8)
        words[:, :wb] = b
        a = codec.decode(words.view("<u8").ravel(), scale)
    return a.reshape(dims)


def _read_layer(r: _Reader, i: int, codec: FixedPoint):
    at = r.pos
    (tag,) = r.unpack("B", f"layer {i} kind")
    if tag not in TAG_KINDS:
        raise ModelFormatError(f"layer {i}: unknown kind tag {tag}", at)
    kind = TAG_KINDS[tag]
    geo: dict = {}
    if kind in ("conv", "dwconv"):
        geo["stride"], geo["padding"] = r.unpack("HH", f"layer {i} geometry")
    elif kind == "batchnorm":
        (geo["eps"],) = r.unpack("d", f"layer {i} eps")
    elif kind == "sign":
        (pm,) = r.unpack("B", f"layer {i} flags")
        geo["pm"] = bool(pm)
    elif kind in ("maxpool", "signpool"):
        geo["k"], geo["stride"] = r.unpack("HH", f"layer {i} window")
    at = r.pos
    (nt,) = r.unpack("B", f"layer {i} tensor count")
    want = {"fc": 2, "conv": 2, "dwconv": 2, "pwconv": 2, "batchnorm": 4}.get(kind, 0)
    if nt != want:
        raise ModelFormatError(f"layer {i} ({kind}): {nt} tensors, expected {want}", at)
    t = [_read_tensor(r, codec, f"layer {i} tensor {j}") for j in range(nt)]
    if kind == "fc":
        return FC(t[0], t[1])
    if kind == "conv":
        return Conv(t[0], t[1], **geo)
    if kind == "dwconv":
        return DWConv(t[0], t[1], **geo)
    if kind == "pwconv":
        return PWConv(t[0], t[1])
    if kind == "batchnorm":
        return BatchNorm(t[0], t[1], t[2], t[3], **geo)
    if kind == "sign":
        return Sign(**geo)
    if kind == "maxpool":
        return MaxPool(**geo)
    if kind == "signpool":
        return FusedSignMaxPool(**geo)
    return {"relu": ReLU, "flatten": Flatten, "output": Output}[kind]()


def loads_model(data: bytes) -> ModelGraph:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise ModelFormatError("not a CBNN model file (bad magic)", 0)
    version, l, f, d, rank = r.unpack("HBBBB", "header")
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version} (this reader handles {VERSION})", 4)
    if not (2 <= l <= 64 and f < l and d >= 3):
        raise ModelFormatError(f"invalid ring parameters l={l} f={f} d={d}", 6)
    dims = r.unpack(f"{rank}I", "input shape")
    (n_layers,) = r.unpack("I", "layer count")
    codec = FixedPoint(l, f)
    layers = [_read_layer(r, i, codec) for i in range(n_layers)]
    end = r.pos
    (stored,) = r.unpack("I", "checksum")
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} unexpected trailing bytes", r.pos)
    computed = zlib.crc32(data[:end])
    if stored != computed:
        raise ModelFormatError(f"checksum mismatch: stored {stored:08x}, computed {computed:08x}", end)
    graph = ModelGraph(dims, layers, l, f, d)
    try:
        graph.shapes()
    except ValueError as e:
        raise ModelFormatError(f"inconsistent model: {e}") from None
    return graph


def load_model(path) -> ModelGraph:
    return loads_model(Path(path).read_bytes())


# --------------------------------------------------------------------------
# inputs


def load_input(path, input_shape: tuple, codec: FixedPoint = FixedPoint()) -> np.ndarray:
    """(N, *input_shape) reals from a CSV (one flattened sample per row) or an .npy file.

    Integer .npy arrays are raw ring words at scale f; float arrays are reals.
    """
    path = Path(path)
    if path.suffix == ".npy":
        a = np.load(path, allow_pickle=False)
        if a.dtype.kind in "ui":
            a = codec.decode(a.astype(np.uint64) & codec.ring.mask)
        a = np.asarray(a, dtype=np.float64)
    else:
        a = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    size = int(np.prod(input_shape))
    if a.size % size:
        raise ValueError(f"{path}: {a.size} values cannot form samples of shape {tuple(input_shape)}")
    return a.reshape((-1,) + tuple(input_shape))


def save_input_csv(x: np.ndarray, path) -> None:
    x = np.asarray(x, dtype=np.float64)
    np.savetxt(path, x.reshape(x.shape[0], -1), delimiter=",", fmt="%.17g")


# --------------------------------------------------------------------------
# run reports


def _stable(v):
    if isinstance(v, dict):
        return {str(k): _stable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_stable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _stable(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            return str(v)
        return float(f"{v:.9e}")
    return v


def report_json(report: dict) -> str:
    """Key-sorted JSON with floats fixed to ten significant digits."""
    return json.dumps(_stable(report), sort_keys=True, indent=2) + "\n"


def write_report(report: dict, path) -> None:
    Path(path).write_text(report_json(report))


def run_report(plan, result, profiles: dict, config: dict) -> dict:
    """Assemble the RunReport dictionary for one secure inference."""
    from .transport import estimate_time

    stats = result.stats
    layers = {}
    for name, c in sorted(stats.top_level().items()):
        layers[name] = {"rounds": c.rounds, "bytes": list(c.bytes), "messages": list(c.messages)}
    analytic = plan.total_cost(result.output.shape[0], config.get("reveal_all", False))
    times = {}
    for pname, prof in profiles.items():
        est = estimate_time(stats, prof)
        times[pname] = {"seconds": est.max, "per_party": list(est.per_party)}
    return {
        "config": config,
        "layers": layers,
        "total": {"rounds": stats.rounds, "bytes": [p.bytes for p in stats.parties],
                  "messages": [p.messages for p in stats.parties], "total_bytes": stats.total_bytes,
                  "comm_MB": stats.total_bytes / 1e6},
        "analytic": {"rounds": analytic.rounds, "bytes": list(analytic.bytes)},
        "time_estimate": times,
        "output": result.output,
        "argmax": result.argmax,
    }
