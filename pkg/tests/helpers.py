"""Shared test utilities: a dealer, a three-party runner and test networks."""
from __future__ import annotations

import numpy as np

from cbnn.model import FC, BatchNorm, Conv, Flatten, MaxPool, ModelGraph, ReLU, Sign
from cbnn.ring import FixedPoint, Ring
from cbnn.sharing import check_consistent, reconstruct, share_bits, share_secret
from cbnn.transport import run_three_parties


def deal(values, ring: Ring, seed: int = 0):
    return share_secret(ring.reduce(np.asarray(values)), np.random.default_rng(seed), ring)


def deal_bits(bits, seed: int = 0):
    return share_bits(np.asarray(bits, dtype=np.uint8), np.random.default_rng(seed))


def run_protocol(fn, *shared, codec: FixedPoint = FixedPoint(), seed: int = 0, mode: str = "inprocess",
                 tap: bool = False):
    """Run ``fn(party, *own_shares)`` at all parties; returns (outputs, stats without setup, taps)."""
    taps = [[], [], []]

    def program(party):
        if tap:
            party.net.tap = taps[party.pid]
        return fn(party, *[s[party.pid] for s in shared])

    res = run_three_parties(program, mode=mode, seed=seed, codec=codec)
    return res.outputs, res.stats.without("setup"), taps


def open_outputs(outputs):
    check_consistent(outputs)
    return reconstruct(outputs[0], outputs[1])


def phase(stats, name: str):
    """The single top-level phase called ``name``."""
    hits = [(k, v) for k, v in stats.top_level().items() if k.rsplit("#", 1)[0] == name]
    assert len(hits) == 1, f"expected one top-level {name!r}, got {list(stats.top_level())}"
    return hits[0][1]


def int_msb(values, l: int) -> np.ndarray:
    """Sign bit via Python integers (independent of the Ring helpers)."""
    return np.array([(int(v) % (1 << l)) >> (l - 1) for v in np.ravel(values)], dtype=np.uint8)


# --------------------------------------------------------------------------
# networks


def random_sign_net(seed: int) -> ModelGraph:
    """Small FC/Conv/Sign mixes, even seeds MLPs and odd seeds CNNs."""
    rng = np.random.default_rng(seed)
    if seed % 2 == 0:
        d_in = int(rng.integers(6, 17))
        h1, h2 = int(rng.integers(8, 25)), int(rng.integers(6, 17))
        layers = [FC(rng.normal(0, 0.2, (h1, d_in)), rng.normal(0, 0.1, h1)), Sign(),
                  FC(rng.normal(0, 0.3, (h2, h1)), rng.normal(0, 0.1, h2)), Sign(),
                  FC(rng.normal(0, 0.3, (10, h2)), rng.normal(0, 0.1, 10))]
        return ModelGraph((d_in,), layers)
    c1 = int(rng.integers(2, 5))
    pad = int(rng.integers(0, 2))
    layers = [Conv(rng.normal(0, 0.3, (c1, 1, 3, 3)), rng.normal(0, 0.1, c1), 1, pad), Sign()]
    side = 8 if pad else 6
    if rng.integers(0, 2):
        layers.append(MaxPool(2, 2))
        side //= 2
    c2 = int(rng.integers(2, 5))
    layers += [Conv(rng.normal(0, 0.3, (c2, c1, 3, 3)), rng.normal(0, 0.1, c2)), Sign(), Flatten()]
    side -= 2
    layers.append(FC(rng.normal(0, 0.3, (10, c2 * side * side)), rng.normal(0, 0.1, 10)))
    return ModelGraph((1, 8, 8), layers)


def random_relu_net(seed: int) -> ModelGraph:
    """Nets that need truncation: ReLU activations between real-valued layers."""
    rng = np.random.default_rng(1000 + seed)
    if seed % 2 == 0:
        d_in = int(rng.integers(6, 13))
        h = int(rng.integers(8, 17))
        layers = [FC(rng.normal(0, 0.25, (h, d_in)), rng.normal(0, 0.1, h)), ReLU(),
                  FC(rng.normal(0, 0.25, (h, h)), rng.normal(0, 0.1, h)), ReLU(),
                  FC(rng.normal(0, 0.25, (6, h)), rng.normal(0, 0.1, 6))]
        return ModelGraph((d_in,), layers)
    layers = [Conv(rng.normal(0, 0.3, (3, 1, 3, 3)), rng.normal(0, 0.1, 3)), ReLU(), MaxPool(2, 2),
              Flatten(), FC(rng.normal(0, 0.3, (6, 27)), rng.normal(0, 0.1, 6))]
    return ModelGraph((1, 8, 8), layers)


def mnistnet3_like(seed: int = 0, side: int = 12) -> ModelGraph:
    """2 CONV, 2 MP, 2 FC with batch norm and Sign, at a reduced input size."""
    rng = np.random.default_rng(seed)

    def bn(c):
        return BatchNorm(rng.uniform(0.5, 1.5, c), rng.normal(0, 0.2, c), rng.normal(0, 0.2, c),
                         rng.uniform(0.5, 1.5, c))

    s1 = (side - 2) // 2
    s2 = (s1 - 2) // 2
    layers = [Conv(rng.normal(0, 0.3, (4, 1, 3, 3)), rng.normal(0, 0.1, 4)), bn(4), Sign(), MaxPool(2, 2),
              Conv(rng.normal(0, 0.3, (6, 4, 3, 3)), rng.normal(0, 0.1, 6)), bn(6), Sign(), MaxPool(2, 2),
              Flatten(),
              FC(rng.normal(0, 0.3, (16, 6 * s2 * s2)), rng.normal(0, 0.1, 16)), bn(16), Sign(),
              FC(rng.normal(0, 0.3, (10, 16)), rng.normal(0, 0.1, 10))]
    return ModelGraph((1, side, side), layers)


def cifarnet2_like(seed: int = 0) -> ModelGraph:
    """9 CONV, 3 MP, 1 FC on 3x32x32 with FitNet-style widths 16-16-16 / 32-32-32 / 48-48-64."""
    rng = np.random.default_rng(seed)
    widths = [(3, 16), (16, 16), (16, 16), (16, 32), (32, 32), (32, 32), (32, 48), (48, 48), (48, 64)]
    layers = []
    for i, (ci, co) in enumerate(widths):
        layers += [Conv(rng.normal(0, 0.1, (co, ci, 3, 3)), np.zeros(co), 1, 1), Sign()]
        if i % 3 == 2:
            layers.append(MaxPool(2, 2))
    layers += [Flatten(), FC(rng.normal(0, 0.1, (10, 64 * 4 * 4)), np.zeros(10))]
    return ModelGraph((3, 32, 32), layers)
