import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbnn.compiler import (CompileError, RangeBudgetError, compile, cost_msb, cost_relu, cost_sign,
                           fuse_bn_relu, fuse_bn_sign, rewrite_graph, substitute_separable,
                           substitute_separable_graph)
from cbnn.inference import measured_cost, secure_inference
from cbnn.model import (FC, BatchNorm, Conv, DWConv, Flatten, FusedSignMaxPool, MaxPool, ModelGraph, PWConv,
                        ReLU, ShapeError, Sign, parameter_count)
from cbnn.oracle import plaintext_forward, real_forward
from helpers import cifarnet2_like, mnistnet3_like, random_relu_net, random_sign_net

EPS = 1e-5


def test_identity_bn_gives_zero_threshold():
    bn = BatchNorm(np.ones(1), np.zeros(1), np.zeros(1), np.array([1 - EPS]))
    assert fuse_bn_sign(bn)[0] == pytest.approx(0.0, abs=1e-12)
    w, b = fuse_bn_relu(np.array([[2.0, -1.0]]), np.array([0.5]), bn)
    assert np.allclose(w, [[2.0, -1.0]]) and np.allclose(b, [0.5])


def test_bn_sign_threshold_example():
    bn = BatchNorm(np.array([2.0]), np.array([3.0]), np.array([1.0]), np.array([4.0 - EPS]))
    assert fuse_bn_sign(bn)[0] == pytest.approx(2.0, rel=1e-12)


def test_bn_relu_fusion_example():
    bn = BatchNorm(np.array([3.0]), np.array([5.0]), np.array([2.0]), np.array([9.0 - EPS]))
    w, b = fuse_bn_relu(np.array([[1.0]]), np.array([0.0]), bn)
    assert w[0, 0] == pytest.approx(1.0, rel=1e-12) and b[0] == pytest.approx(3.0, rel=1e-12)


def _random_bn(rng, c, positive=True):
    gamma = rng.uniform(0.1, 3.0, c) if positive else rng.normal(0, 1, c)
    return BatchNorm(gamma, rng.normal(0, 1, c), rng.normal(0, 1, c), rng.uniform(0.01, 4.0, c))


def test_bn_sign_equivalence_random():
    rng = np.random.default_rng(0)
    bn = _random_bn(rng, 8)
    t = fuse_bn_sign(bn)
    g = bn.gamma / np.sqrt(bn.var + bn.eps)
    b = bn.beta - g * bn.mean
    x = rng.normal(0, 3, (10_000, 8))
    assert np.array_equal(g * x + b >= 0, x + t >= 0)


def test_bn_relu_equivalence_random():
    rng = np.random.default_rng(1)
    bn = _random_bn(rng, 5, positive=False)
    w, b = rng.normal(0, 1, (5, 7)), rng.normal(0, 1, 5)
    fw, fb = fuse_bn_relu(w, b, bn)
    x = rng.normal(0, 1, (1000, 7))
    ref = (x @ w.T + b - bn.mean) / np.sqrt(bn.var + bn.eps) * bn.gamma + bn.beta
    assert np.abs(x @ fw.T + fb - ref).max() < 1e-9


def test_negative_gamma_before_sign_names_channel():
    bn = BatchNorm(np.array([1.0, 0.5, -0.2]), np.zeros(3), np.zeros(3), np.ones(3))
    with pytest.raises(CompileError, match="channel 2"):
        fuse_bn_sign(bn)
    g = ModelGraph((4,), [FC(np.ones((3, 4)) * 0.1, np.zeros(3)), bn, Sign(), FC(np.ones((2, 3)), np.zeros(2))])
    with pytest.raises(CompileError, match="channel 2"):
        compile(g)


def test_bn_shape_mismatch():
    bn = BatchNorm(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2))
    with pytest.raises(CompileError):
        fuse_bn_relu(np.ones((3, 4)), np.zeros(3), bn)


def test_separable_substitution_rules():
    small = Conv(np.zeros((16, 3, 3, 3)), np.zeros(16))
    assert substitute_separable(small, threshold=4) == [small]
    big = Conv(np.zeros((64, 32, 3, 3)), np.arange(64.0), 1, 1)
    dw, pw = substitute_separable(big, threshold=16)
    assert isinstance(dw, DWConv) and isinstance(pw, PWConv)
    assert dw.weight.shape == (32, 1, 3, 3) and pw.weight.shape == (64, 32, 1, 1)
    assert parameter_count([dw, pw]) == 2336
    assert np.array_equal(pw.bias, np.arange(64.0)) and dw.padding == 1


def test_identity_substitution_preserves_shapes_and_values():
    rng = np.random.default_rng(2)
    g = ModelGraph((16, 6, 6), [Conv(rng.normal(0, 0.1, (16, 16, 3, 3)), np.zeros(16), 1, 1), ReLU(), Flatten()])
    s = substitute_separable_graph(g, threshold=16, init="identity")
    assert s.kinds() == ["dwconv", "pwconv", "relu", "flatten"]
    assert s.output_shape == g.output_shape
    x = rng.normal(0, 1, (3, 16, 6, 6))
    assert np.allclose(real_forward(s, x), np.maximum(x, 0).reshape(3, -1))


def test_rewrite_invariants_on_mnistnet3():
    g = mnistnet3_like(0)
    r = rewrite_graph(g)
    kinds = r.kinds()
    assert "batchnorm" not in kinds and "maxpool" not in kinds
    assert kinds.count("signpool") == 2
    assert rewrite_graph(r) == r
    assert isinstance(r.layers[1], FusedSignMaxPool)


def test_rewrite_preserves_real_semantics():
    rng = np.random.default_rng(3)
    for g in (mnistnet3_like(1), random_sign_net(2), random_sign_net(3)):
        x = rng.uniform(-1, 1, (100,) + g.input_shape)
        a, b = real_forward(g, x), real_forward(rewrite_graph(g), x)
        assert np.abs(a - b).max() < 1e-9


def test_pm_sign_is_absorbed():
    rng = np.random.default_rng(4)
    w2 = rng.normal(0, 1, (3, 5))
    g = ModelGraph((4,), [FC(rng.normal(0, 1, (5, 4)), rng.normal(0, 1, 5)), Sign(pm=True),
                          FC(w2, np.zeros(3))])
    r = rewrite_graph(g)
    assert not r.layers[1].pm
    assert np.allclose(r.layers[2].weight, 2 * w2)
    x = rng.uniform(-1, 1, (50, 4))
    assert np.allclose(real_forward(g, x), real_forward(r, x))


def test_pm_sign_before_padded_conv_is_rejected():
    g = ModelGraph((1, 4, 4), [Conv(np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1), Sign(pm=True),
                               Conv(np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1)])
    with pytest.raises(CompileError, match="padding"):
        rewrite_graph(g)


def test_shape_errors_name_the_layer():
    g = ModelGraph((4,), [FC(np.ones((3, 4)), np.zeros(3)), FC(np.ones((2, 5)), np.zeros(2))])
    with pytest.raises(ShapeError, match="layer 1"):
        g.shapes()


def test_range_violation_names_layer():
    g = ModelGraph((16,), [FC(np.full((4, 16), 0.1), np.zeros(4)), ReLU(),
                           FC(np.full((4, 4), 900.0), np.zeros(4)), Sign(), FC(np.ones((2, 4)), np.zeros(2))])
    with pytest.raises(RangeBudgetError) as info:
        compile(g)
    assert info.value.layer == 2 and "layer 2" in str(info.value)


def test_compile_is_idempotent():
    for g in (mnistnet3_like(2), random_relu_net(1), random_sign_net(4)):
        p = compile(g)
        assert compile(p) == p
        assert compile(rewrite_graph(g)) == p


def test_truncation_placement():
    p = compile(random_relu_net(0))
    ops = [s.op for s in p.steps]
    assert ops == ["linear", "trunc", "relu", "linear", "trunc", "relu", "linear"]
    assert p.out_scale == 2 * p.graph.f
    for s in p.steps:
        if s.op == "trunc":
            assert s.bound < 2 ** (p.graph.l - 2 - p.graph.f) + 3


def test_mnistnet3_analytic_cost_matches_measurement():
    g = mnistnet3_like(5)
    plan = compile(g)
    x = np.random.default_rng(5).uniform(-1, 1, (3,) + g.input_shape)
    res = secure_inference(plan, x)
    ana, meas = plan.cost(3), measured_cost(res.stats)
    assert set(ana) == set(meas)
    for name, c in ana.items():
        assert (c.rounds, c.bytes) == (meas[name].rounds, tuple(meas[name].bytes)), name
    assert plan.total_cost(3).rounds == res.stats.rounds


def test_cost_formulas():
    assert cost_msb(10, 4).rounds == 4 and cost_msb(10, 4).bytes == (160, 280, 160)
    assert cost_sign(1, 4).rounds == 6 and cost_sign(1, 4).bytes == (20, 44, 20)
    assert cost_relu(1, 4).rounds == 9 and cost_relu(1, 4).bytes == (28, 40, 28)


def test_range_analysis_is_sound_in_debug_mode():
    rng = np.random.default_rng(6)
    for seed in (0, 1):
        g = random_sign_net(seed)
        plan = compile(g)
        x = rng.uniform(-1, 1, (5000,) + g.input_shape)
        res = secure_inference(plan, x, debug=True)
        assert res.inspector.errors == []


def test_fixed_point_matches_real_at_argmax():
    rng = np.random.default_rng(7)
    for seed in range(4):
        g = random_relu_net(seed)
        x = rng.uniform(-1, 1, (100,) + g.input_shape)
        a = real_forward(g, x)
        b = plaintext_forward(g, x, mode="fixedpoint")
        top = np.sort(a, axis=1)
        margin = top[:, -1] - top[:, -2]
        ok = margin > 2**-6
        assert np.array_equal(a.argmax(1)[ok], b.argmax(1)[ok])
        assert np.abs(a - b).max() < 0.05


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_compiled_graphs_have_no_batchnorm(seed):
    p = compile(mnistnet3_like(seed))
    assert all(not isinstance(layer, (BatchNorm, MaxPool)) for layer in p.graph.layers)


def test_cifarnet2_like_parameter_counts():
    g = cifarnet2_like(0)
    s = substitute_separable_graph(g, threshold=16, init="identity")
    assert parameter_count(g) == 100528 and parameter_count(s) == 22816
