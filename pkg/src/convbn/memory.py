"""Saved-for-backward accounting, analytic and instrumented.

The analytic side predicts, per node, exactly which tensors a forward pass
retains and how many elements they hold; the instrumented side runs the
executor and asserts the recorded sets match the prediction name for name
and element for element.

Saved sets per node kind (element counts in parentheses):

    conv2d                 X (input)
    conv2d in Tune mode    X, w_fused (|weight|), b_fused (C_out)
    conv2d in Deploy mode  X           # fused once, plain conv at runtime
    bn2d eval              Y (input)
    bn2d train             xhat (input), mean (C), var (C)
    relu, linear           X (input)
    add, identity, pool, input, output   nothing

Counts cover tensors saved for backward only; parameters, gradients and
optimizer state are out of scope.  Snapshot copies kept for revert are
reported in a separate column and excluded from the mode comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .block import Mode
from .errors import ConvBNError, SchemaError
from .graph import Graph, execute_forward, switch_mode, SNAPSHOT_PREFIX
from .tensor import dtype_of


class FootprintMismatch(ConvBNError):
    """Instrumented saved sets disagree with the analytic prediction."""


@dataclass
class FootprintReport:
    mode: str
    input_shape: tuple
    dtype: str
    rows: list = field(default_factory=list)  # {node, op, saved: {name: elems}}
    totals_by_mode: dict = field(default_factory=dict)
    snapshot_elements: int = 0

    @property
    def total_elements(self):
        return sum(sum(r["saved"].values()) for r in self.rows)

    def total_bytes(self):
        return self.total_elements * dtype_of(self.dtype).itemsize

    def ratios(self):
        ev = self.totals_by_mode.get("eval", 0)
        if ev == 0:
            return {"tune_over_eval": 1.0, "deploy_over_eval": 1.0}
        return {
            "tune_over_eval": self.totals_by_mode["tune"] / ev,
            "deploy_over_eval": self.totals_by_mode["deploy"] / ev,
        }

    def to_json(self):
        item = dtype_of(self.dtype).itemsize
        return {
            "mode": self.mode,
            "input_shape": list(self.input_shape),
            "dtype": self.dtype,
            "per_node": [
                {
                    "node": r["node"],
                    "op": r["op"],
                    "saved": r["saved"],
                    "elements": sum(r["saved"].values()),
                    "bytes": sum(r["saved"].values()) * item,
                }
                for r in self.rows
            ],
            "total_elements": self.total_elements,
            "total_bytes": self.total_bytes(),
            "totals_by_mode_elements": dict(self.totals_by_mode),
            "totals_by_mode_bytes": {
                k: v * item for k, v in self.totals_by_mode.items()
            },
            "ratios": self.ratios(),
            "snapshot_elements": self.snapshot_elements,
            "snapshot_bytes": self.snapshot_elements * item,
        }

    def to_table(self):
        lines = []
        header = f"{'node':<12} {'op':<16} {'saved tensors':<40} {'elements':>12} {'bytes':>14}"
        lines.append(header)
        lines.append("-" * len(header))
        item = dtype_of(self.dtype).itemsize
        for r in self.rows:
            if not r["saved"]:
                continue
            names = ", ".join(f"{k}={v}" for k, v in r["saved"].items())
            elems = sum(r["saved"].values())
            lines.append(f"{r['node']:<12} {r['op']:<16} {names:<40} {elems:>12} {elems * item:>14}")
        lines.append("-" * len(header))
        lines.append(
            f"{'total (' + self.mode + ')':<70} {self.total_elements:>12} {self.total_bytes():>14}"
        )
        for mode, total in sorted(self.totals_by_mode.items()):
            lines.append(f"{'total (' + mode + ')':<70} {total:>12} {total * item:>14}")
        ratios = self.ratios()
        lines.append(f"tune/eval = {ratios['tune_over_eval']:.4f}   "
                     f"deploy/eval = {ratios['deploy_over_eval']:.4f}")
        if self.snapshot_elements:
            lines.append(f"revert snapshots (excluded): {self.snapshot_elements} elements")
        return "\n".join(lines)


def _infer_shapes(g: Graph, input_shape):
    """Static shape propagation mirroring the executor's rules."""
    shapes = {}
    for node in g._ordered_nodes():
        try:
            if node.op == "input":
                shapes[node.id] = tuple(input_shape)
            elif node.op in ("output", "identity", "relu"):
                shapes[node.id] = shapes[node.inputs[0]]
            elif node.op == "add":
                a, b = (shapes[r] for r in node.inputs)
                if a != b:
                    raise SchemaError(f"add operands disagree: {a} vs {b}", node_id=node.id)
                shapes[node.id] = a
            elif node.op == "global_avg_pool":
                n, c, _, _ = shapes[node.inputs[0]]
                shapes[node.id] = (n, c)
            elif node.op == "linear":
                n, _ = shapes[node.inputs[0]]
                shapes[node.id] = (n, g.params[f"{node.param}.weight"].shape[0])
            elif node.op == "conv2d":
                n, c, h, w = shapes[node.inputs[0]]
                c_out, c_in, kh, kw = g.params[f"{node.param}.weight"].shape
                if c != c_in:
                    raise SchemaError(
                        f"{c} input channels vs weight C_in {c_in}", node_id=node.id)
                sh, sw = node.attrs.get("stride", (1, 1))
                ph, pw = node.attrs.get("padding", (0, 0))
                ho = (h + 2 * ph - kh) // sh + 1
                wo = (w + 2 * pw - kw) // sw + 1
                if ho < 1 or wo < 1:
                    raise SchemaError("non-positive conv output extent", node_id=node.id)
                shapes[node.id] = (n, c_out, ho, wo)
            elif node.op == "bn2d":
                shapes[node.id] = shapes[node.inputs[0]]
            else:
                raise SchemaError(
                    f"cannot infer shapes through op '{node.op}'", node_id=node.id)
        except (ValueError, KeyError) as exc:
            raise SchemaError(f"shape inference failed: {exc}", node_id=node.id) from None
    return shapes


def _numel(shape):
    n = 1
    for e in shape:
        n *= e
    return n


def _predict_rows(g: Graph, input_shape):
    shapes = _infer_shapes(g, input_shape)
    rows = []
    for node in g._ordered_nodes():
        saved = {}
        in_shape = shapes[node.inputs[0]] if node.inputs else None
        if node.op == "conv2d":
            saved["X"] = _numel(in_shape)
            if node.attrs.get("convbn_mode") == Mode.TUNE.value:
                saved["w_fused"] = int(g.params[f"{node.param}.weight"].size)
                saved["b_fused"] = int(g.params[f"{node.param}.weight"].shape[0])
        elif node.op == "bn2d":
            c = in_shape[1]
            if node.attrs.get("mode", "eval") == "train":
                saved["xhat"] = _numel(in_shape)
                saved["mean"] = c
                saved["var"] = c
            else:
                saved["Y"] = _numel(in_shape)
        elif node.op in ("relu", "linear"):
            saved["X"] = _numel(in_shape)
        rows.append({"node": node.id, "op": node.op, "saved": saved})
    return rows


def count_saved(g: Graph, mode, input_shape, dtype="f32"):
    """Analytic footprint of the graph as it would execute in `mode`.

    Eligible Conv->BN pairs are accounted per the mode's saved set;
    ineligible sites keep their unfused accounting.  Totals for all four
    modes are computed so the report can state the tune/eval and
    deploy/eval ratios.
    """
    mode = Mode.parse(mode) if not isinstance(mode, Mode) else mode
    dtype_of(dtype)

    def rows_for(m):
        gc = g.copy()
        switch_mode(gc, m)
        return _predict_rows(gc, input_shape), gc

    rows, gc = rows_for(mode)
    totals = {}
    for m in (Mode.EVAL, Mode.TUNE, Mode.DEPLOY, Mode.TRAIN):
        if m is mode:
            mode_rows = rows
        else:
            mode_rows, _ = rows_for(m)
        totals[m.value] = sum(sum(r["saved"].values()) for r in mode_rows)
    snapshot = sum(
        int(v.size) for k, v in gc.params.items() if k.startswith(SNAPSHOT_PREFIX)
    )
    return FootprintReport(
        mode=mode.value,
        input_shape=tuple(input_shape),
        dtype=dtype,
        rows=rows,
        totals_by_mode=totals,
        snapshot_elements=snapshot,
    )


def verify_against_engine(g: Graph, mode, x, dtype=None):
    """Execute with instrumentation and assert recorded saved sets equal the
    analytic prediction exactly.  Raises FootprintMismatch listing per-node
    extras/missing entries on any discrepancy."""
    dtype = dtype or ("f32" if x.dtype == np.float32 else "f64")
    report = count_saved(g, mode, x.shape, dtype)
    gc = g.copy()
    switch_mode(gc, mode)
    _, saved, _ = execute_forward(gc, x)
    problems = []
    predicted = {r["node"]: r["saved"] for r in report.rows}
    for node_id, entry in saved.items():
        recorded = {name: int(t.size) for name, t in entry.tensors.items()}
        expect = predicted.get(node_id, {})
        if recorded != expect:
            missing = sorted(set(expect) - set(recorded))
            extra = sorted(set(recorded) - set(expect))
            changed = sorted(
                k for k in set(recorded) & set(expect) if recorded[k] != expect[k]
            )
            problems.append(
                f"node '{node_id}': missing={missing} extra={extra} size-mismatch={changed} "
                f"(recorded {recorded}, predicted {expect})"
            )
    if problems:
        raise FootprintMismatch("; ".join(problems))
    return report
