"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import itertools
import time

import numpy as np
from scipy.stats import chisquare

from cbnn.compiler import compile, rewrite_graph
from cbnn.inference import measured_cost, secure_inference
from cbnn.model import FC, BatchNorm, ModelGraph, ReLU, Sign, parameter_count
from cbnn.nonlinear import fused_sign_maxpool_windows, msb_budget, msb_extract, relu, sign
from cbnn.oracle import fixedpoint_forward, fixedpoint_step, plaintext_forward, real_forward, real_layer
from cbnn.ot import ot3_transfer
from cbnn.ring import FixedPoint, Ring
from cbnn.sharing import mul_shares, reconstruct_bits
from cbnn.training import TrainConfig, lambda_sweep, make_blobs, train_teacher
from cbnn.transport import LAN, WAN, estimate_time
from conftest import record
from helpers import (cifarnet2_like, deal, int_msb, mnistnet3_like, open_outputs, random_relu_net,
                     random_sign_net, run_protocol)

RING = Ring(32)
ALPHA = 0.01


def conclude(number, title, ok, detail):
    record(number, title, "PASS" if ok else "FAIL", detail)
    assert ok, detail


def layerwise_check(plan, res, x):
    """Replay every step on the secure previous output.

    Returns (exact steps, mismatching steps, truncation deviations seen).
    """
    ring, f = plan.codec.ring, plan.codec.f
    prev = plan.codec.encode(x)
    exact, bad, devs = 0, [], set()
    for step, got in zip(plan.steps, res.trace):
        want = fixedpoint_step(step, prev, ring, f)
        diff = ring.signed(ring.sub(got, want))
        if step.op == "trunc":
            devs |= set(np.unique(diff).tolist())
            if not set(np.unique(diff).tolist()) <= {0, -1}:
                bad.append((step.layer, step.op))
        elif diff.any():
            bad.append((step.layer, step.op))
        else:
            exact += 1
        prev = got
    return exact, bad, devs


def test_c01_oracle_equivalence():
    t0 = time.perf_counter()
    nets_ok, steps_exact, end_to_end, total = 0, 0, 0, 0
    problems = []
    for seed in range(20):
        g = random_sign_net(seed)
        plan = compile(g)
        x = np.random.default_rng(seed).uniform(-1, 1, (100,) + g.input_shape)
        res = secure_inference(plan, x, seed=seed, debug=True)
        exact, bad, _ = layerwise_check(plan, res, x)
        steps_exact += exact
        if bad:
            problems.append((seed, bad))
        else:
            nets_ok += 1
        end_to_end += int(np.all(res.raw == fixedpoint_forward(plan, x), axis=1).sum())
        total += 100
    wall = time.perf_counter() - t0
    ok = nets_ok == 20 and wall < 60
    conclude(1, "oracle equivalence", ok,
             f"{nets_ok}/20 nets layerwise exact ({steps_exact} non-truncation steps bit-equal, "
             f"truncations within 1 ulp); end-to-end bit-equal outputs {end_to_end}/{total}; "
             f"{wall:.1f}s{'; ' + str(problems) if problems else ''}")


def test_c02_truncation_tolerance():
    rng = np.random.default_rng(2)
    agree = considered = 0
    layer_bad, devs = [], set()
    for seed in range(6):
        g = random_relu_net(seed)
        plan = compile(g)
        x = rng.uniform(-1, 1, (500,) + g.input_shape)
        res = secure_inference(plan, x, seed=seed, debug=True)
        _, bad, d = layerwise_check(plan, res, x)
        layer_bad += bad
        devs |= d
        ref = real_forward(g, x)
        top = np.sort(ref, axis=1)
        keep = top[:, -1] - top[:, -2] > 2**-8
        considered += int(keep.sum())
        agree += int((res.argmax[keep] == ref.argmax(1)[keep]).sum())
    rate = agree / considered
    ok = not layer_bad and devs <= {0, -1} and rate >= 0.99
    conclude(2, "truncation tolerance", ok,
             f"truncation deviations {sorted(devs)} ulp; argmax agreement {agree}/{considered} = {rate:.4f} "
             f"on margin > 2^-8")


def test_c03_msb_extraction():
    rng = np.random.default_rng(3)
    b = msb_budget(32, 8)
    x = rng.integers(-b + 1, b, 100_000)
    outs, _, _ = run_protocol(lambda p, s: msb_extract(p, s, 8), deal(RING.reduce(x), RING, 1), seed=1)
    hits = int((reconstruct_bits(outs[0], outs[1]) == int_msb(x, 32)).sum())
    ring16 = Ring(16)
    b16 = msb_budget(16, 4)
    xs = np.arange(-b16 + 1, b16)
    outs, _, _ = run_protocol(lambda p, s: msb_extract(p, s, 4), deal(ring16.reduce(xs), ring16, 2),
                              codec=FixedPoint(16, 4), seed=2)
    hits16 = int((reconstruct_bits(outs[0], outs[1]) == int_msb(xs, 16)).sum())
    ok = hits == len(x) and hits16 == len(xs)
    conclude(3, "MSB extraction", ok, f"l=32 d=8: {hits}/{len(x)}; l=16 d=4 exhaustive: {hits16}/{len(xs)}")


def test_c04_activation_protocols():
    windows = np.array(list(itertools.product((0, 1), repeat=4)), dtype=np.uint64)
    members = [deal(windows[:, j], RING, j) for j in range(4)]
    outs, _, _ = run_protocol(lambda p, *w: fused_sign_maxpool_windows(p, list(w)), *members)
    pool_ok = int((open_outputs(outs) == windows.max(axis=1)).sum())
    rng = np.random.default_rng(4)
    x = rng.integers(-msb_budget(32, 8) + 1, msb_budget(32, 8), 10_000)
    outs, _, _ = run_protocol(relu, deal(RING.reduce(x), RING, 5), seed=5)
    relu_ok = int((RING.signed(open_outputs(outs)) == np.maximum(x, 0)).sum())
    outs, _, _ = run_protocol(sign, deal(RING.reduce(x), RING, 6), seed=6)
    sign_ok = int((open_outputs(outs) == (x >= 0)).sum())
    ok = pool_ok == 16 and relu_ok == 10_000 and sign_ok == 10_000
    conclude(4, "Sign/ReLU/maxpool protocols", ok,
             f"windows {pool_ok}/16, ReLU {relu_ok}/10000, Sign {sign_ok}/10000")


PRIMITIVE_ROUNDS = {"linear": 1, "trunc": 2, "ot": 2, "b2a": 2, "msb": 4, "sign": 2, "relu": 5, "mul": 1,
                    "open": 1}


def test_c05_round_and_byte_accounting():
    nets = [random_sign_net(s) for s in range(10)] + [random_relu_net(s) for s in range(4)] + \
        [mnistnet3_like(0), mnistnet3_like(1)]
    mismatches, prim_bad, order_bad = [], [], []
    for i, g in enumerate(nets):
        plan = compile(g)
        batch = 2
        x = np.random.default_rng(i).uniform(-1, 1, (batch,) + g.input_shape)
        res = secure_inference(plan, x, seed=i)
        ana, meas = plan.cost(batch), measured_cost(res.stats)
        if set(ana) != set(meas):
            mismatches.append((i, "phases"))
        for name, c in ana.items():
            m = meas.get(name)
            if m is None or (c.rounds, c.bytes) != (m.rounds, tuple(m.bytes)):
                mismatches.append((i, name))
        for name, want in PRIMITIVE_ROUNDS.items():
            for path, c in res.stats.find(name):
                if c.rounds != want:
                    prim_bad.append((i, path, c.rounds))
        if not estimate_time(res.stats, WAN).max > estimate_time(res.stats, LAN).max:
            order_bad.append(i)
    ok = not mismatches and not prim_bad and not order_bad
    conclude(5, "round/byte accounting", ok,
             f"{len(nets)} nets: phase mismatches {mismatches or 'none'}, primitive round errors "
             f"{prim_bad or 'none'}, WAN<=LAN {order_bad or 'none'}")


def _bn(rng, c):
    return BatchNorm(rng.uniform(0.5, 1.5, c), rng.normal(0, 0.2, c), rng.normal(0, 0.2, c),
                     rng.uniform(0.5, 1.5, c))


def _sign_distances(graph, x):
    """Smallest |input| of any Sign (or fused pool) over each sample, in real arithmetic."""
    dist = np.full(x.shape[0], np.inf)
    for layer in rewrite_graph(graph).layers:
        if layer.kind in ("sign", "signpool"):
            dist = np.minimum(dist, np.abs(x.reshape(x.shape[0], -1)).min(axis=1))
        x = real_layer(layer, x)
    return dist


def test_c06_bn_fusion_equivalence():
    rng = np.random.default_rng(6)
    sign_net = ModelGraph((12,), [FC(rng.normal(0, 0.3, (16, 12)), rng.normal(0, 0.1, 16)), _bn(rng, 16), Sign(),
                                  FC(rng.normal(0, 0.3, (8, 16)), rng.normal(0, 0.1, 8))])
    relu_net = ModelGraph((12,), [FC(rng.normal(0, 0.2, (16, 12)), rng.normal(0, 0.1, 16)), _bn(rng, 16), ReLU(),
                                  FC(rng.normal(0, 0.2, (8, 16)), rng.normal(0, 0.1, 8)), _bn(rng, 8)])
    lines, ok = [], True
    for name, g in (("sign", sign_net), ("sign-cnn", mnistnet3_like(6)), ("relu", relu_net)):
        x = rng.uniform(-1, 1, (1000,) + g.input_shape)
        unfused = real_forward(g, x)
        fused_graph = rewrite_graph(g)
        err = float(np.abs(unfused - real_forward(fused_graph, x)).max())
        fixed = plaintext_forward(fused_graph, x, mode="fixedpoint")
        same = fixed.argmax(1) == unfused.argmax(1)
        top = np.sort(unfused, axis=1)
        keep = (top[:, -1] - top[:, -2] > 2**-8) & (_sign_distances(g, x) > 2**-8)
        branch_ok = err < 1e-9 and bool(same[keep].all())
        ok &= branch_ok
        lines.append(f"{name}: real max err {err:.1e}, fixed-point argmax {int(same[keep].sum())}/{int(keep.sum())} "
                     f"clear of ties ({int(same.sum())}/1000 overall)")
    conclude(6, "BN fusion equivalence", ok, "; ".join(lines))


def test_c07_separable_reduction():
    g = cifarnet2_like(0)
    plan = compile(g, separable_threshold=16, separable_init="identity")
    conv_kinds = ("conv", "dwconv", "pwconv")
    before = parameter_count([layer for layer in g.layers if layer.kind in conv_kinds])
    after = parameter_count([layer for layer in plan.graph.layers if layer.kind in conv_kinds])
    block = 1 - after / before
    whole = 1 - plan.meta["params"] / parameter_count(g)
    ok = block >= 0.80
    conclude(7, "separable-convolution parameter reduction", ok,
             f"conv block {before} -> {after} ({100 * block:.1f}% fewer); whole model "
             f"{parameter_count(g)} -> {plan.meta['params']} ({100 * whole:.1f}% fewer, reported only)")


def test_c08_distillation_property():
    t0 = time.perf_counter()
    data = make_blobs(n_train=1000, n_val=1000, n_classes=8, dim=16, separation=1.0, seed=0)
    teacher, th = train_teacher(data, TrainConfig(epochs=40, lr=3e-3, seed=0), hidden=(128,))
    lams = [round(0.1 * k, 1) for k in range(1, 11)]
    res = lambda_sweep(data, teacher, TrainConfig(epochs=30, hidden=(16,)), lams, range(5))
    wall = time.perf_counter() - t0
    kd, base = res.mean(0.1), res.mean(1.0)
    curve = ", ".join(f"{lam}:{res.mean(lam):.4f}" for lam in lams)
    detail = (f"teacher val {th.val_acc[-1]:.4f}; mean val acc lambda=0.1 {kd:.4f} vs lambda=1 {base:.4f} "
              f"over 5 seeds; curve {curve}; {wall:.0f}s")
    # a statistical property: reported, flagged when it does not hold, never fatal
    record(8, "distillation property", "PASS" if kd >= base else "FLAG", detail)
    assert wall < 300


def _uniform_bytes(words: np.ndarray) -> float:
    """Smallest chi-square p-value over the low and high byte of each 32-bit word."""
    w = words.astype(np.uint64)
    lo = np.bincount((w & np.uint64(0xFF)).astype(np.int64), minlength=256)
    hi = np.bincount((w >> np.uint64(24)).astype(np.int64), minlength=256)
    return min(chisquare(lo).pvalue, chisquare(hi).pvalue)


def _payload_words(taps, pid, key):
    (payload,) = [t[2] for t in taps[pid] if key in t[1]]
    return np.frombuffer(payload, dtype="<u4")


def test_c09_share_privacy():
    n = 20_000
    ones = np.ones(n, dtype=np.uint64)
    _, _, taps = run_protocol(mul_shares, deal(ones, RING, 1), deal(ones, RING, 2), tap=True)
    pvals = {f"mul reshare at P{pid}": _uniform_bytes(_payload_words(taps, pid, "reshare")) for pid in range(3)}

    m0, m1 = np.zeros(n, dtype=np.uint64), np.ones(n, dtype=np.uint64)
    c = np.zeros(n, dtype=np.uint8)

    def ot(p):
        return ot3_transfer(p, 1, 0, 2, (n,), (m0, m1) if p.pid == 1 else None, c if p.pid != 1 else None)

    _, _, taps = run_protocol(ot, tap=True)
    pair = _payload_words(taps, 2, "pair")
    pvals["OT pair at helper (m0)"] = _uniform_bytes(pair[:n])
    pvals["OT pair at helper (m1)"] = _uniform_bytes(pair[n:])
    pvals["OT selection at receiver"] = _uniform_bytes(_payload_words(taps, 0, "sel"))

    x = np.full(n, 12345)
    _, _, taps = run_protocol(lambda p, s: msb_extract(p, s), deal(RING.reduce(x), RING, 3), tap=True)
    parts = [_payload_words(taps, pid, "open").astype(np.uint64) for pid in range(3)]
    u = RING.add(RING.add(parts[0], parts[1]), parts[2])
    pvals["sign bit of opened u"] = chisquare(np.bincount(int_msb(u, 32), minlength=2)).pvalue
    for pid in range(3):
        pvals[f"open share at P{pid}"] = _uniform_bytes(parts[pid])
    ok = min(pvals.values()) > ALPHA
    conclude(9, "share-privacy smoke tests", ok,
             f"{n} samples each, min p = {min(pvals.values()):.3f} ("
             + ", ".join(f"{k} {v:.3f}" for k, v in pvals.items()) + ")")


def test_c10_cross_mode_determinism():
    results = []
    for g in (mnistnet3_like(10), random_relu_net(3)):
        plan = compile(g)
        x = np.random.default_rng(10).uniform(-1, 1, (4,) + g.input_shape)
        a = secure_inference(plan, x, mode="inprocess", seed=7)
        b = secure_inference(plan, x, mode="tcp", seed=7)
        results.append(np.array_equal(a.raw, b.raw) and a.full_stats.to_dict() == b.full_stats.to_dict())
    ok = all(results)
    conclude(10, "cross-mode determinism", ok,
             f"in-process vs TCP outputs and TrafficStats identical for {sum(results)}/{len(results)} nets")
