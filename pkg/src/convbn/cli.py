"""Command-line harness.

    convbn verify     equivalence/fusion/adjoint suites; exit 0 iff all pass
    convbn gradcheck  finite-difference checks for every op and block mode
    convbn stability  one-step c^2 ratio + Eval-vs-Deploy training comparison
    convbn coeffs     scaling-coefficient histograms from a CBNT stats file
    convbn bench      timing/memory grid over the bundled conv stack
    convbn train      desk-scale SGD on the synthetic dataset
    convbn rewrite    load graph, apply turn_on, write graph + report

Reports are JSON with canonical key order; bench timing numbers are the
only non-deterministic fields.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import bench as bench_mod
from . import checks, container
from .errors import ConvBNError
from .graph import dump_graph, dump_params, graph_to_json, load_graph, turn_on
from .memory import count_saved
from .train import TrainConfig, run_training


def _emit(report, out_path, also_stdout=True):
    text = json.dumps(report, indent=2, sort_keys=True)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
    if also_stdout:
        print(text)


def cmd_verify(args):
    report = checks.verify_all(instances=args.instances, seed=args.seed,
                               inject_fault=args.inject_fault)
    report["experiment"] = "verify"
    report["config"] = {"seed": args.seed, "instances": args.instances,
                        "inject_fault": args.inject_fault}
    _emit(report, args.out)
    return 0 if report["passed"] else 1


def cmd_gradcheck(args):
    report = checks.gradcheck_all(instances=args.instances, seed=args.seed + 9000)
    report["experiment"] = "gradcheck"
    report["config"] = {"seed": args.seed, "instances": args.instances}
    _emit(report, args.out)
    return 0 if report["passed"] else 1


def cmd_stability(args):
    coeffs = [float(c) for c in args.coeffs.split(",")] if args.coeffs else None
    if coeffs is None:
        # default: log-uniform over [0.1, 10]
        from .tensor import Rng
        import numpy as np
        rng = Rng(args.seed + 7)
        coeffs = np.exp(rng.uniform((8,), np.log(0.1), np.log(10.0))).tolist()
    one = checks.one_step_update_ratio(coeffs, lr=args.lr, seed=args.seed + 7000)
    multi = checks.stability_multistep(coeffs, steps=args.steps, lr=args.lr,
                                       seed=args.seed + 7100)
    passed = one["max_rel_err"] <= 1e-8
    report = {
        "experiment": "stability",
        "config": {"seed": args.seed, "coeffs": coeffs, "steps": args.steps, "lr": args.lr},
        "one_step": one,
        "one_step_tolerance": 1e-8,
        "multistep": multi,
        "passed": passed,
    }
    _emit(report, args.out)
    return 0 if passed else 1


def cmd_coeffs(args):
    tensors = container.read_tensors(args.stats)
    report = checks.coefficient_histogram(tensors, bins=args.bins)
    report["experiment"] = "coeffs"
    report["config"] = {"stats": args.stats, "bins": args.bins}
    _emit(report, args.out)
    return 0


def cmd_bench(args):
    grid = None
    if args.grid:
        grid = []
        for cell in args.grid.split(";"):
            b, s = cell.split("x")
            grid.append((int(b), int(s)))
    report = bench_mod.bench_modes(grid=grid, seed=args.seed, reps=args.reps,
                                   dtype=args.dtype)
    report["experiment"] = "bench"
    if args.compare_backends:
        report["backends"] = bench_mod.bench_backends(grid=grid, seed=args.seed,
                                                      dtype=args.dtype)
    print(bench_mod.bench_table(report))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(bench_mod.bench_csv(report))
    _emit(report, args.out, also_stdout=False)
    return 0


def cmd_train(args):
    phases = []
    if args.phases:
        for part in args.phases.split(";"):
            mode, steps = part.split(":")
            phases.append((mode, int(steps)))
    config = TrainConfig(
        lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
        batch_size=args.batch_size, steps=args.steps, seed=args.seed,
        mode=args.mode, dtype=args.dtype, phases=phases,
    )
    graph = load_graph(args.graph) if args.graph else None
    dataset = None
    if args.dataset:
        packed = container.read_tensors(args.dataset)
        dataset = (packed["images"], packed["labels"].astype(int))
    result = run_training(config, graph=graph, dataset=dataset)
    report = {
        "experiment": "train",
        "config": {
            "lr": config.lr, "momentum": config.momentum,
            "weight_decay": config.weight_decay, "batch_size": config.batch_size,
            "seed": config.seed, "mode": config.mode, "dtype": config.dtype,
            "phases": config.schedule(),
        },
        "losses": result["losses"],
        "accuracies": result["accuracies"],
        "modes": result["modes"],
        "final_loss": result["losses"][-1],
        "final_accuracy": result["accuracies"][-1],
    }
    _emit(report, args.out)
    if args.save_params:
        dump_params(result["graph"], args.save_params)
    return 0


def cmd_rewrite(args):
    g = load_graph(args.graph, params=container.read_tensors(args.params) if args.params else None)
    report = turn_on(g, args.mode)
    if args.out_graph:
        dump_graph(g, args.out_graph)
    else:
        print(json.dumps(graph_to_json(g), indent=2, sort_keys=True))
    if args.out_params:
        dump_params(g, args.out_params)
    doc = {"experiment": "rewrite", "mode": args.mode, "report": report.to_json()}
    if args.footprint_shape:
        shape = tuple(int(x) for x in args.footprint_shape.split("x"))
        footprint = count_saved(g, args.mode, shape, args.dtype)
        doc["footprint"] = footprint.to_json()
        if args.out_graph:  # stdout is free of the graph JSON in this case
            print(footprint.to_table())
    _emit(doc, args.out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="convbn",
        description="ConvBN mode engine: verification, rewriting, benchmarks, training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
        p.add_argument("--out", help="write the JSON report here")

    p = sub.add_parser("verify", help="run the equivalence/fusion/adjoint suites")
    common(p)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--inject-fault", action="store_true",
                   help="self-test: perturb one fused output; the suite must fail")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference checks (f64)")
    common(p)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("stability", help="Deploy-mode instability quantification")
    common(p)
    p.add_argument("--coeffs", help="comma-separated per-channel scaling coefficients")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.05)
    p.set_defaults(fn=cmd_stability)

    p = sub.add_parser("coeffs", help="scaling-coefficient histograms from CBNT stats")
    common(p)
    p.add_argument("stats", help="CBNT file with <layer>.gamma / <layer>.running_var")
    p.add_argument("--bins", type=int, default=30)
    p.set_defaults(fn=cmd_coeffs)

    p = sub.add_parser("bench", help="timing/memory grid")
    common(p)
    p.add_argument("--grid", help="cells as BxS;BxS, e.g. 16x32;32x48")
    p.add_argument("--reps", type=int, default=9)
    p.add_argument("--csv", help="also write the grid as CSV")
    p.add_argument("--compare-backends", action="store_true",
                   help="include compiled-vs-numpy backend comparison")
    p.set_defaults(fn=cmd_bench, dtype="f32")

    p = sub.add_parser("train", help="desk-scale SGD on the synthetic dataset")
    common(p)
    p.add_argument("--mode", choices=("train", "eval", "tune", "deploy"), default="eval")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0005)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--phases", help="mode:steps;mode:steps schedule, overrides --mode/--steps")
    p.add_argument("--graph", help="graph JSON to train instead of the bundled toy net")
    p.add_argument("--dataset", help="CBNT file with 'images' and 'labels'")
    p.add_argument("--save-params", help="write final parameters as CBNT")
    p.set_defaults(fn=cmd_train, dtype="f32")

    p = sub.add_parser("rewrite", help="apply turn_on to a graph")
    common(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--params", help="CBNT parameter file (overrides params_file)")
    p.add_argument("--mode", choices=("train", "eval", "tune", "deploy"), default="tune")
    p.add_argument("--out-graph", help="write the rewritten graph JSON here")
    p.add_argument("--out-params", help="write the rewritten parameter store here")
    p.add_argument("--footprint-shape", help="NxCxHxW; include a footprint report")
    p.set_defaults(fn=cmd_rewrite)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConvBNError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
