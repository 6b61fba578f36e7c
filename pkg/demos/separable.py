"""How much the separable-convolution substitution saves on a CIFAR-sized net.

Every 3x3 convolution with at least 16 input channels is replaced by a
depthwise 3x3 followed by a pointwise 1x1, and max-pools after Sign become
the fused Sign-pool kernel.
"""
import numpy as np

from cbnn import FC, Conv, Flatten, MaxPool, ModelGraph, Sign, compile, parameter_count

rng = np.random.default_rng(0)
widths = [(3, 16), (16, 16), (16, 16), (16, 32), (32, 32), (32, 32), (32, 48), (48, 48), (48, 64)]
layers = []
for i, (ci, co) in enumerate(widths):
    layers += [Conv(rng.normal(0, 0.1, (co, ci, 3, 3)), np.zeros(co), 1, 1), Sign()]
    if i % 3 == 2:
        layers.append(MaxPool(2, 2))
layers += [Flatten(), FC(rng.normal(0, 0.1, (10, 64 * 4 * 4)), np.zeros(10))]
net = ModelGraph((3, 32, 32), layers)

plan = compile(net, separable_threshold=16, separable_init="identity")
convs = ("conv", "dwconv", "pwconv")
before = parameter_count([layer for layer in net.layers if layer.kind in convs])
after = parameter_count([layer for layer in plan.graph.layers if layer.kind in convs])
print(f"conv block: {before} -> {after} weights ({100 * (1 - after / before):.1f}% fewer)")
total, total_after = parameter_count(net), plan.meta["params"]
print(f"whole net:  {total} -> {total_after} weights ({100 * (1 - total_after / total):.1f}% fewer)")
print("layer kinds after compile:", " ".join(plan.graph.kinds()))

# Fewer weights also means less traffic per inference.
cost = plan.cost(1)
print("rounds per inference:", sum(c.rounds for c in cost.values()))
print("bytes per inference: ", sum(sum(c.bytes) for c in cost.values()))
