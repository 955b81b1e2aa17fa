"""Timing micro-benchmarks over the bundled conv stack.

Methodology: monotonic wall clock; modes are measured in paired rounds
(eval, tune, deploy adjacent within each round) so machine drift hits all
modes equally; each sample is the minimum of a few back-to-back iterations,
which rejects scheduler bursts; the reported figure is the median over
rounds (at least five, after two warmup rounds).  Iterations shorter than
1 ms are looped inside one timing window so timer resolution never limits
a sample.  Timing fields are the only non-deterministic part of any report
produced by this package.
"""

from __future__ import annotations

import time
from statistics import median

import numpy as np

from . import kernels
from .fixtures import bench_graph
from .graph import execute_backward, execute_forward, switch_mode
from .memory import count_saved
from .tensor import Rng, dtype_of

DEFAULT_GRID = [(b, s) for b in (16, 32, 64) for s in (32, 48, 64)]
MODES = ("eval", "tune", "deploy")
MIN_WINDOW_S = 1e-3


def _iteration(g, x, dz):
    _, saved, _ = execute_forward(g, x)
    execute_backward(g, saved, dz)


def _calibrate(g, x, dz):
    t0 = time.perf_counter()
    _iteration(g, x, dz)
    t = time.perf_counter() - t0
    if t >= MIN_WINDOW_S:
        return 1
    return max(1, int(np.ceil(MIN_WINDOW_S / max(t, 1e-9))))


def _sample(g, x, dz, repeats, best_of):
    best = float("inf")
    for _ in range(best_of):
        t0 = time.perf_counter()
        for _ in range(repeats):
            _iteration(g, x, dz)
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best


def bench_modes(grid=None, seed=0, reps=9, warmup=2, best_of=2, dtype="f32",
                channels=3, width=3, layers=10):
    """Forward+backward timing per cell and mode, plus the analytic
    saved-tensor footprint for the same graph and input."""
    grid = DEFAULT_GRID if grid is None else list(grid)
    base = bench_graph(seed=seed, dtype=dtype, in_channels=channels,
                       width=width, layers=layers)
    dt = dtype_of(dtype)
    cells = []
    for batch, size in grid:
        rng = Rng(seed + 13 * batch + size)
        x = rng.normal((batch, channels, size, size), dtype=dt)
        graphs = {}
        for mode in MODES:
            gm = base.copy()
            switch_mode(gm, mode)
            graphs[mode] = gm
        out, _, _ = execute_forward(graphs["eval"], x)
        dz = rng.normal(out.shape, dtype=dt)
        repeats = _calibrate(graphs["eval"], x, dz)
        samples = {mode: [] for mode in MODES}
        for round_idx in range(warmup + reps):
            for mode in MODES:
                t = _sample(graphs[mode], x, dz, repeats, best_of)
                if round_idx >= warmup:
                    samples[mode].append(t)
        times = {mode: median(samples[mode]) for mode in MODES}
        memory = {}
        for mode in MODES:
            rep = count_saved(base, mode, x.shape, dtype)
            memory[mode] = {
                "elements": rep.totals_by_mode[mode],
                "bytes": rep.totals_by_mode[mode] * dt.itemsize,
            }
        cells.append({
            "batch": batch,
            "size": size,
            "repeats": repeats,
            "time_s": times,
            "memory": memory,
            "ordering_ok": times["deploy"] <= times["tune"] <= times["eval"],
            "tune_le_eval": times["tune"] <= times["eval"],
            "tune_vs_eval_saving_pct": 100.0 * (1.0 - times["tune"] / times["eval"]),
        })
    return {
        "backend": kernels.backend_name(),
        "dtype": dtype,
        "warmup": warmup,
        "reps": reps,
        "best_of": best_of,
        "fixture": {"channels": channels, "width": width, "layers": layers},
        "cells": cells,
        "ordering_ok": all(c["ordering_ok"] for c in cells),
    }


def bench_backends(grid=None, seed=0, reps=7, warmup=2, best_of=2, dtype="f32"):
    """Compiled extension vs numpy fallback on identical eval-mode work."""
    grid = [(16, 32), (32, 48), (64, 64)] if grid is None else list(grid)
    base = bench_graph(seed=seed, dtype=dtype)
    dt = dtype_of(dtype)
    rows = []
    previous = kernels.backend_name()
    try:
        for batch, size in grid:
            rng = Rng(seed + 13 * batch + size)
            x = rng.normal((batch, 3, size, size), dtype=dt)
            g = base.copy()
            out, _, _ = execute_forward(g, x)
            dz = rng.normal(out.shape, dtype=dt)
            row = {"batch": batch, "size": size, "time_s": {}}
            for name in kernels.available_backends():
                kernels.set_backend(name)
                repeats = _calibrate(g, x, dz)
                samples = []
                for round_idx in range(warmup + reps):
                    t = _sample(g, x, dz, repeats, best_of)
                    if round_idx >= warmup:
                        samples.append(t)
                row["time_s"][name] = median(samples)
            if "cython" in row["time_s"] and "numpy" in row["time_s"]:
                row["numpy_over_cython"] = row["time_s"]["numpy"] / row["time_s"]["cython"]
            rows.append(row)
    finally:
        kernels.set_backend(previous)
    return {"available": kernels.available_backends(), "cells": rows}


def bench_table(report):
    lines = []
    header = (f"{'batch':>5} {'size':>5} | {'eval (s)':>10} {'tune (s)':>10} "
              f"{'deploy (s)':>10} | {'eval MB':>9} {'tune MB':>9} {'deploy MB':>9} | ord")
    lines.append(header)
    lines.append("-" * len(header))
    for c in report["cells"]:
        t, m = c["time_s"], c["memory"]
        lines.append(
            f"{c['batch']:>5} {c['size']:>5} | {t['eval']:>10.5f} {t['tune']:>10.5f} "
            f"{t['deploy']:>10.5f} | {m['eval']['bytes']/2**20:>9.2f} "
            f"{m['tune']['bytes']/2**20:>9.2f} {m['deploy']['bytes']/2**20:>9.2f} | "
            f"{'ok' if c['ordering_ok'] else 'violated'}"
        )
    return "\n".join(lines)


def bench_csv(report):
    rows = ["batch,size,eval_s,tune_s,deploy_s,eval_bytes,tune_bytes,deploy_bytes,ordering_ok"]
    for c in report["cells"]:
        t, m = c["time_s"], c["memory"]
        rows.append(
            f"{c['batch']},{c['size']},{t['eval']:.6g},{t['tune']:.6g},{t['deploy']:.6g},"
            f"{m['eval']['bytes']},{m['tune']['bytes']},{m['deploy']['bytes']},"
            f"{int(c['ordering_ok'])}"
        )
    return "\n".join(rows) + "\n"
