"""Secure inference on a small binarized CNN, start to finish.

Run with ``python demos/quickstart.py``. Everything happens in one process:
the three parties are threads talking over in-memory channels.
"""
import numpy as np

from cbnn import (FC, BatchNorm, Conv, Flatten, MaxPool, ModelGraph, Sign, compile, plaintext_forward,
                  secure_inference)
from cbnn.inference import measured_cost
from cbnn.transport import LAN, WAN, estimate_time

rng = np.random.default_rng(0)


def bn(c):
    return BatchNorm(rng.uniform(0.5, 1.5, c), rng.normal(0, 0.2, c), rng.normal(0, 0.2, c),
                     rng.uniform(0.5, 1.5, c))


# A model owner's network: conv, batch norm, Sign, max-pool, then a linear head.
net = ModelGraph((1, 10, 10), [
    Conv(rng.normal(0, 0.3, (4, 1, 3, 3)), rng.normal(0, 0.1, 4)), bn(4), Sign(), MaxPool(2, 2),
    Flatten(),
    FC(rng.normal(0, 0.3, (10, 64)), rng.normal(0, 0.1, 10)),
])

# Compilation folds each BatchNorm into a Sign threshold, fuses Sign + MaxPool
# into one protocol and places truncations where the range budget needs them.
plan = compile(net)
print("compiled steps:", " -> ".join(f"{s.op}" for s in plan.steps))

x = rng.uniform(-1, 1, (8, 1, 10, 10))
res = secure_inference(plan, x, seed=1)
real = plaintext_forward(net, x, mode="real")
print("secure argmax:   ", res.argmax.tolist())
print("plaintext argmax:", real.argmax(1).tolist())
print("max |secure - real| logit:", float(np.abs(res.output - real).max()))

# Communication: measured per phase, and the cost model's prediction.
analytic = plan.cost(len(x))
print(f"\n{'phase':<22}{'rounds':>7}  bytes P0/P1/P2")
measured = measured_cost(res.stats)
for name in analytic:
    c = measured[name]
    flag = "" if (c.rounds, tuple(c.bytes)) == (analytic[name].rounds, analytic[name].bytes) else "  (mismatch)"
    print(f"{name:<22}{c.rounds:>7}  {'/'.join(map(str, c.bytes))}{flag}")
print(f"\ntotal rounds {res.stats.rounds}, {res.stats.total_bytes} bytes")
for label, prof in (("LAN", LAN), ("WAN", WAN)):
    print(f"estimated {label} time: {estimate_time(res.stats, prof).max * 1e3:.1f} ms")
