"""Command line: run-party, simulate, compile, train-toy, bench.

Exit codes: 0 success, 2 configuration error, 3 protocol desync,
4 transport failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .compiler import DEFAULT_SEPARABLE_THRESHOLD, CompileError, compile
from .inference import DATA_OWNER, secure_inference, secure_program
from .modelio import ModelFormatError, load_input, load_model, report_json, run_report, save_model
from .oracle import DistillConfig
from .transport import (EXIT_CONFIG, EXIT_DESYNC, EXIT_OK, EXIT_TRANSPORT, PROFILES, DesyncError,
                        PartyFailure, TransportError, estimate_time, merge_traffic, run_party)

log = logging.getLogger("cbnn")


class ConfigError(ValueError):
    pass


def _addr(s: str) -> tuple[str, int]:
    host, _, port = s.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"bad address {s!r}, expected host:port")
    return host, int(port)


def parse_peers(spec: str, party: int, listen: str | None) -> list[tuple[str, int]]:
    """Three addresses indexed by party id, or the two others plus ``listen``."""
    addrs = [_addr(a) for a in spec.split(",") if a]
    if len(addrs) == 3:
        return addrs
    if len(addrs) == 2:
        if listen is None:
            raise ConfigError("with two peers, --listen host:port gives this party's own address")
        others = [j for j in range(3) if j != party]
        out: list = [None] * 3
        out[party] = _addr(listen)
        for j, a in zip(others, addrs):
            out[j] = a
        return out
    raise ConfigError("--peers needs two or three host:port entries")


def _load_plan(path, d=None):
    return compile(load_model(path), d=d)


def _profiles(name: str | None):
    if name is None:
        return dict(PROFILES)
    if name not in PROFILES:
        raise ConfigError(f"unknown net profile {name!r}")
    return {name: PROFILES[name], **{k: v for k, v in PROFILES.items() if k != name}}


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    plan = _load_plan(args.model)
    x = load_input(args.input, plan.input_shape, plan.codec)
    t0 = time.perf_counter()
    res = secure_inference(plan, x, mode=args.mode, seed=args.seed, reveal_all=args.reveal_all)
    wall = time.perf_counter() - t0
    config = {"command": "simulate", "model": Path(args.model).name, "input": Path(args.input).name,
              "seed": args.seed, "net_profile": args.net_profile, "reveal_all": args.reveal_all,
              "l": plan.graph.l, "f": plan.graph.f, "d": plan.d, "batch": int(x.shape[0])}
    report = run_report(plan, res, _profiles(args.net_profile), config)
    if args.report:
        Path(args.report).write_text(report_json(report))
    est = estimate_time(res.stats, PROFILES[args.net_profile])
    print(f"argmax: {' '.join(str(int(a)) for a in res.argmax)}")
    print(f"rounds {res.stats.rounds}  comm {res.stats.total_bytes / 1e6:.6f} MB  "
          f"est {args.net_profile} {est.max:.6f} s  wall {wall:.3f} s")
    return EXIT_OK


def cmd_run_party(args) -> int:
    peers = parse_peers(args.peers, args.party, args.listen)
    plan = _load_plan(args.model)
    x = None
    batch = args.batch
    if args.party == DATA_OWNER:
        if args.input is None:
            raise ConfigError("party 0 needs --input")
        x = load_input(args.input, plan.input_shape, plan.codec)
        if batch is not None and batch != x.shape[0]:
            raise ConfigError(f"--batch {batch} disagrees with {x.shape[0]} input rows")
        batch = x.shape[0]
    elif batch is None:
        if args.input is None:
            raise ConfigError("parties 1 and 2 need --batch (or the --input file to count rows)")
        batch = load_input(args.input, plan.input_shape, plan.codec).shape[0]
    program = secure_program(plan, x, batch=batch, reveal_all=args.reveal_all)
    out, export = run_party(args.party, program, peers, args.seed, plan.codec, args.timeout)
    own = merge_traffic([export, {"": (0, 0, 0, [])}, {"": (0, 0, 0, [])}])
    result = {"party": args.party, "bytes_sent": own.parties[0].bytes,
              "messages_sent": own.parties[0].messages}
    if out is not None:
        dec = plan.codec.decode(out, plan.out_scale)
        result["output"] = dec.tolist()
        result["argmax"] = np.argmax(dec.reshape(dec.shape[0], -1), axis=1).tolist()
        print(f"argmax: {' '.join(str(a) for a in result['argmax'])}")
    if args.out:
        Path(args.out).write_text(report_json(result))
    return EXIT_OK


def cmd_compile(args) -> int:
    graph = load_model(args.model)
    try:
        plan = compile(graph, d=args.msb_budget, separable_threshold=args.separable_threshold,
                       separable_init=args.separable_init, seed=args.seed)
    except CompileError as e:
        raise ConfigError(str(e)) from None
    save_model(plan.graph, args.out)
    before = compile(graph, d=args.msb_budget).meta["params"] if args.separable_threshold else None
    cost = plan.total_cost(1)
    print(f"layers: {' '.join(plan.graph.kinds())}")
    print(f"steps: {' '.join(s.op for s in plan.steps)}")
    line = f"parameters: {plan.meta['params']}"
    if before:
        line += f" (was {before}, {100.0 * (before - plan.meta['params']) / before:.1f}% fewer)"
    print(line)
    print(f"analytic cost per sample: {cost.rounds} rounds, bytes per party {list(cost.bytes)}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .training import TrainConfig, load_csv_dataset, make_blobs, train_student_kd, train_teacher

    cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    dcfg = cfg.get("data", {})
    if "csv" in dcfg:
        data = load_csv_dataset(dcfg["csv"], dcfg.get("val_fraction", 0.2), dcfg.get("seed", 0))
    else:
        data = make_blobs(dcfg.get("n_train", 1000), dcfg.get("n_val", 1000), dcfg.get("classes", 8),
                          dcfg.get("dim", 16), dcfg.get("separation", 1.0), dcfg.get("seed", 0))
    tcfg = cfg.get("teacher", {})
    teacher, th = train_teacher(data, TrainConfig(tcfg.get("epochs", 40), tcfg.get("batch_size", 64),
                                                  tcfg.get("lr", 3e-3), tcfg.get("seed", 0)),
                                tuple(tcfg.get("hidden", (128,))))
    scfg = cfg.get("student", {})
    dist = DistillConfig(scfg.get("T", 10.0), scfg.get("lam", 0.1))
    student, sh = train_student_kd(data, teacher, TrainConfig(
        scfg.get("epochs", 30), scfg.get("batch_size", 64), scfg.get("lr", 1e-2), scfg.get("seed", 0),
        tuple(scfg.get("hidden", (16,))), dist))
    graph = student.to_graph()
    save_model(graph, args.out)
    print(f"teacher train {th.train_acc[-1]:.4f} val {th.val_acc[-1]:.4f}" if th.val_acc else "teacher untrained")
    if sh.val_acc:
        print(f"student train {sh.train_acc[-1]:.4f} val {sh.val_acc[-1]:.4f} (lambda={dist.lam}, T={dist.T})")
    return EXIT_OK


def cmd_bench(args) -> int:
    plan = _load_plan(args.model)
    rng = np.random.default_rng(args.seed)
    walls, reports = [], []
    for t in range(args.trials):
        x = rng.uniform(-1.0, 1.0, (args.batch,) + plan.input_shape)
        t0 = time.perf_counter()
        res = secure_inference(plan, x, seed=args.seed + t)
        walls.append(time.perf_counter() - t0)
        reports.append(run_report(plan, res, dict(PROFILES), {}))
    first = reports[0]
    agg = {
        "config": {"command": "bench", "model": Path(args.model).name, "trials": args.trials,
                   "batch": args.batch, "seed": args.seed},
        "total": first["total"],
        "analytic": first["analytic"],
        "time_estimate": first["time_estimate"],
        "layers": first["layers"],
        "wall_seconds": {"mean": float(np.mean(walls)), "min": float(np.min(walls)),
                         "max": float(np.max(walls))},
    }
    text = report_json(agg)
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbnn", description="Three-party secure inference for binarized networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run-party", help="participate in a TCP run as one party")
    r.add_argument("--party", type=int, choices=(0, 1, 2), required=True)
    r.add_argument("--peers", required=True, help="host:port for parties 0,1,2 (or the two others)")
    r.add_argument("--listen", help="own host:port when --peers lists only the two others")
    r.add_argument("--model", required=True)
    r.add_argument("--input", help="input CSV/.npy (required at party 0)")
    r.add_argument("--batch", type=int, help="public batch size (parties 1 and 2)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--reveal-all", action="store_true")
    r.add_argument("--timeout", type=float, default=120.0)
    r.add_argument("--out", help="write this party's result as JSON")
    r.set_defaults(func=cmd_run_party)

    s = sub.add_parser("simulate", help="run all three parties in one process")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--net-profile", choices=sorted(PROFILES), default="lan")
    s.add_argument("--report")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--reveal-all", action="store_true")
    s.add_argument("--mode", choices=("inprocess", "tcp"), default="inprocess")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compile", help="apply secure-inference rewrites to a model file")
    c.add_argument("--model", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--separable-threshold", type=int, nargs="?", const=DEFAULT_SEPARABLE_THRESHOLD)
    c.add_argument("--separable-init", choices=("random", "identity"), default="random")
    c.add_argument("--msb-budget", type=int, help="mask width d (budget |x| < 2^(l-1-d))")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_compile)

    t = sub.add_parser("train-toy", help="train a teacher and a distilled Sign student")
    t.add_argument("--config", help="JSON with optional data/teacher/student sections")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_toy)

    b = sub.add_parser("bench", help="repeat secure inference on random inputs")
    b.add_argument("--model", required=True)
    b.add_argument("--trials", type=int, default=3)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--report")
    b.set_defaults(func=cmd_bench)
    return p


def _classify(e: BaseException) -> tuple[int, str]:
    party = ""
    if isinstance(e, PartyFailure):
        party = f"P{e.party}: "
        e = e.cause
    if isinstance(e, DesyncError):
        return EXIT_DESYNC, f"{party}protocol desync: {e}"
    if isinstance(e, (TransportError, ConnectionError, TimeoutError)):
        return EXIT_TRANSPORT, f"{party}transport failure: {e}"
    if isinstance(e, (ConfigError, ModelFormatError, CompileError, ValueError, OverflowError,
                      FileNotFoundError, IsADirectoryError, json.JSONDecodeError, KeyError)):
        return EXIT_CONFIG, f"{party}configuration error: {e}"
    raise e


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - mapped to exit codes
        code, msg = _classify(e)
        print(f"cbnn: {msg}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
