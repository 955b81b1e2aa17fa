"""Computation-graph IR, the Conv->BN pattern matcher, the turn_on rewrite
pass with revert/switch, and a whole-network executor.

Graphs are loaded from JSON (schema "cbn-graph/1"):

    {
      "version": "cbn-graph/1",
      "nodes": [{"id": str, "op": str, "inputs": [str, ...],
                 "param": str?, "attrs": {...}?}, ...],
      "params_file": str?          # optional CBNT path, relative to the JSON
    }

Node parameters live in a flat name -> tensor store keyed "<param>.weight",
"<param>.gamma", etc.  A rewrite never deletes tensors: fused pairs keep
their BN parameter set in the store (tracked through `reserved_bns`) and
Deploy rewrites stash pre-fusion copies under "__snapshot__.<param>.*" so
revert restores the store bit for bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import container
from .block import Mode, fuse_params
from .errors import ModeError, SchemaError, ShapeError
from .ops import (
    BatchStats,
    BNParams,
    ConvParams,
    _bn_train_backward_xhat,
    bn_eval_backward,
    bn_eval_forward,
    bn_train_forward_full,
    conv2d_backward,
    conv2d_forward,
    global_avg_pool_backward,
    global_avg_pool_forward,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
)

SCHEMA_VERSION = "cbn-graph/1"

OP_KINDS = frozenset({
    "conv1d", "conv2d", "conv3d", "bn1d", "bn2d", "bn3d",
    "relu", "add", "global_avg_pool", "linear", "identity", "input", "output",
})
_ARITY = {"input": 0, "add": 2}  # every other op takes exactly one input
_CONV_BN_DIM = {"conv1d": "bn1d", "conv2d": "bn2d", "conv3d": "bn3d"}

SNAPSHOT_PREFIX = "__snapshot__."


@dataclass
class Node:
    id: str
    op: str
    inputs: list
    param: str | None = None
    attrs: dict = field(default_factory=dict)
    users: list = field(default_factory=list, repr=False)


@dataclass
class RewriteReport:
    """Outcome of a matcher/rewrite pass over all conv candidates."""

    rewritten: list = field(default_factory=list)  # (conv_id, bn_id, mode name)
    skipped: list = field(default_factory=list)    # (node_id, reason)

    def to_json(self):
        return {
            "rewritten": [
                {"conv": c, "bn": b, "mode": m} for c, b, m in self.rewritten
            ],
            "skipped": [{"node": n, "reason": r} for n, r in self.skipped],
        }


class Graph:
    def __init__(self, nodes, params=None, reserved_bns=None):
        self.nodes = {}
        for node in nodes:
            if node.id in self.nodes:
                raise SchemaError("duplicate node id", node_id=node.id)
            self.nodes[node.id] = node
        self.params = dict(params or {})
        self.reserved_bns = list(reserved_bns or [])
        self.validate()

    # -- structure ---------------------------------------------------------

    def validate(self):
        inputs = [n for n in self.nodes.values() if n.op == "input"]
        outputs = [n for n in self.nodes.values() if n.op == "output"]
        if len(inputs) != 1:
            raise SchemaError(f"graph must have exactly one input node, found {len(inputs)}")
        if len(outputs) != 1:
            raise SchemaError(f"graph must have exactly one output node, found {len(outputs)}")
        for node in self.nodes.values():
            if node.op not in OP_KINDS:
                raise SchemaError(f"unknown op '{node.op}'", node_id=node.id)
            arity = _ARITY.get(node.op, 1)
            if len(node.inputs) != arity:
                raise SchemaError(
                    f"op '{node.op}' takes {arity} input(s), got {len(node.inputs)}",
                    node_id=node.id,
                )
            for ref in node.inputs:
                if ref not in self.nodes:
                    raise SchemaError(f"references missing id '{ref}'", node_id=node.id)
        self._toposort()  # raises on cycles
        self._rebuild_users()
        for node in self.nodes.values():
            for name in self._param_names(node, required_only=True):
                if name not in self.params:
                    raise SchemaError(f"unresolved parameter '{name}'", node_id=node.id)

    def _rebuild_users(self):
        for node in self.nodes.values():
            node.users = []
        for node in self.nodes.values():
            for ref in node.inputs:
                self.nodes[ref].users.append(node.id)

    def _toposort(self):
        indeg = {nid: len(n.inputs) for nid, n in self.nodes.items()}
        ready = [nid for nid, d in indeg.items() if d == 0]
        order = []
        consumers = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for ref in node.inputs:
                consumers[ref].append(node.id)
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for user in consumers[nid]:
                indeg[user] -= 1
                if indeg[user] == 0:
                    ready.append(user)
        if len(order) != len(self.nodes):
            stuck = sorted(set(self.nodes) - set(order))
            raise SchemaError(f"cycle involving {stuck}", node_id=stuck[0])
        return order

    def toposort(self):
        return self._toposort()

    def _param_names(self, node, required_only=False):
        p = node.param
        if p is None:
            if node.op in ("conv1d", "conv2d", "conv3d", "bn1d", "bn2d", "bn3d", "linear"):
                raise SchemaError(f"op '{node.op}' requires a param reference", node_id=node.id)
            return []
        if node.op in ("conv1d", "conv2d", "conv3d"):
            names = [f"{p}.weight"]
            if not required_only and f"{p}.bias" in self.params:
                names.append(f"{p}.bias")
            return names
        if node.op in ("bn1d", "bn2d", "bn3d"):
            return [f"{p}.gamma", f"{p}.beta", f"{p}.running_mean", f"{p}.running_var"]
        if node.op == "linear":
            names = [f"{p}.weight"]
            if not required_only and f"{p}.bias" in self.params:
                names.append(f"{p}.bias")
            return names
        if node.op == "identity" and node.attrs.get("reserved_bn"):
            # parameters of a fused-away BN stay resolvable for revert
            return [f"{p}.gamma", f"{p}.beta", f"{p}.running_mean", f"{p}.running_var"]
        return []

    def copy(self):
        nodes = [Node(n.id, n.op, list(n.inputs), n.param, json.loads(json.dumps(n.attrs)))
                 for n in self.nodes.values()]
        params = {k: v.copy() for k, v in self.params.items()}
        reserved = json.loads(json.dumps(self.reserved_bns))
        return Graph(nodes, params, reserved)

    # -- trainability ------------------------------------------------------

    def trainable_names(self):
        """Parameters SGD may update under the current wiring.

        Running statistics, tune buffers and snapshots are never trainable;
        gamma/beta of a Deploy-fused pair are consumed and drop out.
        """
        deployed_bn = {
            r["bn_param"] for r in self.reserved_bns if r["mode"] == Mode.DEPLOY.value
        }
        names = []
        for node in self._ordered_nodes():
            p = node.param
            if node.op in ("conv2d", "conv1d", "conv3d", "linear"):
                names.append(f"{p}.weight")
                if f"{p}.bias" in self.params:
                    names.append(f"{p}.bias")
            elif node.op in ("bn1d", "bn2d", "bn3d"):
                names.extend([f"{p}.gamma", f"{p}.beta"])
            elif node.op == "identity" and node.attrs.get("reserved_bn"):
                if p not in deployed_bn:
                    names.extend([f"{p}.gamma", f"{p}.beta"])
        return names

    def _ordered_nodes(self):
        return [self.nodes[nid] for nid in self.toposort()]


# -- JSON load/dump ---------------------------------------------------------


def graph_from_json(doc, params=None, base_dir=None):
    if not isinstance(doc, dict):
        raise SchemaError("graph document must be a JSON object")
    version = doc.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported graph schema version {version!r}")
    nodes = []
    for entry in doc.get("nodes", []):
        if "id" not in entry or "op" not in entry:
            raise SchemaError(f"node entry missing id/op: {entry!r}")
        nodes.append(Node(
            id=str(entry["id"]),
            op=str(entry["op"]),
            inputs=[str(x) for x in entry.get("inputs", [])],
            param=entry.get("param"),
            attrs=dict(entry.get("attrs", {})),
        ))
    if params is None:
        params = {}
        pf = doc.get("params_file")
        if pf is not None:
            path = pf if base_dir is None else os.path.join(base_dir, pf)
            params = container.read_tensors(path)
    g = Graph(nodes, params, doc.get("reserved_bns"))
    g._params_file = doc.get("params_file")
    return g


def load_graph(path, params=None):
    with open(path) as fh:
        doc = json.load(fh)
    return graph_from_json(doc, params=params, base_dir=os.path.dirname(os.path.abspath(path)))


def graph_to_json(g: Graph):
    doc = {"version": SCHEMA_VERSION, "nodes": []}
    for node in g.nodes.values():
        entry = {"id": node.id, "op": node.op, "inputs": list(node.inputs)}
        if node.param is not None:
            entry["param"] = node.param
        if node.attrs:
            entry["attrs"] = {k: node.attrs[k] for k in sorted(node.attrs)}
        doc["nodes"].append(entry)
    if g.reserved_bns:
        doc["reserved_bns"] = g.reserved_bns
    pf = getattr(g, "_params_file", None)
    if pf is not None:
        doc["params_file"] = pf
    return doc


def dump_graph(g: Graph, path):
    with open(path, "w") as fh:
        json.dump(graph_to_json(g), fh, indent=2, sort_keys=True)
        fh.write("\n")


def dump_params(g: Graph, path):
    return container.write_tensors(g.params, path)


# -- pattern matcher --------------------------------------------------------


def find_convbn_pairs(g: Graph):
    """Match Conv->BN pairs under the single-consumer rule.

    Returns (pairs, skipped): `pairs` are eligible 2D (conv_id, bn_id)
    tuples; every other conv candidate lands in `skipped` with a reason in
    {multi_consumer, no_bn_follower, unsupported_dim}.
    """
    pairs = []
    skipped = []
    for node in g._ordered_nodes():
        if node.op not in _CONV_BN_DIM:
            continue
        if node.attrs.get("convbn_mode"):
            continue  # already rewritten
        bn_kind = _CONV_BN_DIM[node.op]
        bn_users = [u for u in node.users if g.nodes[u].op == bn_kind]
        if len(node.users) == 1 and len(bn_users) == 1:
            if node.op == "conv2d":
                pairs.append((node.id, bn_users[0]))
            else:
                skipped.append((node.id, "unsupported_dim"))
        elif bn_users and len(node.users) > 1:
            skipped.append((node.id, "multi_consumer"))
        else:
            skipped.append((node.id, "no_bn_follower"))
    return pairs, skipped


# -- rewrite pass -----------------------------------------------------------


def turn_on(g: Graph, mode):
    """Rewrite every eligible Conv->BN pair to Tune or Deploy.

    Tune: the conv node gains the frozen-statistics buffers and adopts the
    BN affine parameters as trainable extras.  Deploy: the conv parameters
    are replaced by their fused values (pre-fusion copies are snapshotted).
    Either way the BN node becomes an identity and its parameter set is
    tracked in reserved_bns.
    """
    mode = Mode.parse(mode) if not isinstance(mode, Mode) else mode
    if mode not in (Mode.TUNE, Mode.DEPLOY):
        raise ModeError(f"turn_on supports Tune and Deploy, not {mode.value}")
    pairs, skipped = find_convbn_pairs(g)
    report = RewriteReport(skipped=list(skipped))
    for conv_id, bn_id in pairs:
        conv = g.nodes[conv_id]
        bn = g.nodes[bn_id]
        cp, bp = conv.param, bn.param
        eps = float(bn.attrs.get("eps", 1e-5))
        momentum = float(bn.attrs.get("momentum", 0.1))
        record = {
            "conv": conv_id, "bn": bn_id, "mode": mode.value,
            "conv_param": cp, "bn_param": bp,
            "bn_attrs": {k: bn.attrs[k] for k in sorted(bn.attrs)},
            "had_bias": f"{cp}.bias" in g.params,
        }
        if mode is Mode.TUNE:
            var = g.params[f"{bp}.running_var"]
            g.params[f"{cp}.weight_coeff"] = (
                1.0 / np.sqrt(var + np.asarray(eps, dtype=var.dtype))
            ).reshape(-1, 1, 1, 1)
            g.params[f"{cp}.bias_delta"] = -g.params[f"{bp}.running_mean"]
        else:
            w = g.params[f"{cp}.weight"]
            b = g.params.get(f"{cp}.bias")
            g.params[f"{SNAPSHOT_PREFIX}{cp}.weight"] = w.copy()
            if b is not None:
                g.params[f"{SNAPSHOT_PREFIX}{cp}.bias"] = b.copy()
            w_fused, b_fused = fuse_params(
                w, b, g.params[f"{bp}.gamma"], g.params[f"{bp}.beta"],
                g.params[f"{bp}.running_mean"], g.params[f"{bp}.running_var"], eps,
            )
            g.params[f"{cp}.weight"] = w_fused
            g.params[f"{cp}.bias"] = b_fused
        conv.attrs["convbn_mode"] = mode.value
        conv.attrs["bn_param"] = bp
        conv.attrs["bn_eps"] = eps
        conv.attrs["bn_momentum"] = momentum
        bn.op = "identity"
        bn.attrs = {"reserved_bn": True}
        g.reserved_bns.append(record)
        report.rewritten.append((conv_id, bn_id, mode.value))
    g._rebuild_users()
    return report


def revert(g: Graph):
    """Undo all rewrites; restores the parameter store bit for bit.

    Tune pairs drop their buffers (live parameters were never modified, so
    any training done in Tune mode is kept).  Deploy pairs restore the
    snapshotted pre-fusion parameters, discarding Deploy-mode updates.
    """
    report = RewriteReport()
    for record in reversed(g.reserved_bns):
        conv_id, bn_id = record["conv"], record["bn"]
        cp, bp = record["conv_param"], record["bn_param"]
        conv = g.nodes[conv_id]
        bn = g.nodes[bn_id]
        if record["mode"] == Mode.TUNE.value:
            g.params.pop(f"{cp}.weight_coeff", None)
            g.params.pop(f"{cp}.bias_delta", None)
        else:
            g.params[f"{cp}.weight"] = g.params.pop(f"{SNAPSHOT_PREFIX}{cp}.weight")
            snap_bias = g.params.pop(f"{SNAPSHOT_PREFIX}{cp}.bias", None)
            if record["had_bias"]:
                g.params[f"{cp}.bias"] = snap_bias
            else:
                g.params.pop(f"{cp}.bias", None)
        bn.op = _CONV_BN_DIM[conv.op]
        bn.attrs = dict(record["bn_attrs"])
        for key in ("convbn_mode", "bn_param", "bn_eps", "bn_momentum"):
            conv.attrs.pop(key, None)
        report.rewritten.append((conv_id, bn_id, record["mode"]))
    g.reserved_bns = []
    g._rebuild_users()
    return report


def switch_mode(g: Graph, target):
    """revert, then re-apply the target mode (Tune/Deploy rewrite, or plain
    Train/Eval wiring with the BN nodes' mode attribute set accordingly)."""
    target = Mode.parse(target) if not isinstance(target, Mode) else target
    revert(g)
    if target in (Mode.TUNE, Mode.DEPLOY):
        return turn_on(g, target)
    for node in g.nodes.values():
        if node.op in ("bn1d", "bn2d", "bn3d"):
            node.attrs["mode"] = target.value
    return RewriteReport()


# -- executor ---------------------------------------------------------------


def _conv_params(g: Graph, node: Node):
    return ConvParams(
        g.params[f"{node.param}.weight"],
        g.params.get(f"{node.param}.bias"),
        tuple(node.attrs.get("stride", (1, 1))),
        tuple(node.attrs.get("padding", (0, 0))),
    )


def _bn_params(g: Graph, prefix, attrs):
    return BNParams(
        g.params[f"{prefix}.gamma"],
        g.params[f"{prefix}.beta"],
        g.params[f"{prefix}.running_mean"],
        g.params[f"{prefix}.running_var"],
        eps=float(attrs.get("eps", 1e-5)),
        momentum=float(attrs.get("momentum", 0.1)),
    )


class _SavedEntry:
    __slots__ = ("tensors", "meta")

    def __init__(self, tensors=None, **meta):
        self.tensors = tensors or {}
        self.meta = meta


def execute_forward(g: Graph, x):
    """Topological-order evaluation.

    Returns (output, saved, stat_updates) where `saved` maps node id to its
    retained-for-backward tensors and `stat_updates` holds EMA-updated
    running statistics produced by train-mode BN nodes (empty otherwise).
    """
    values = {}
    saved = {}
    stat_updates = {}
    out_value = None
    for node in g._ordered_nodes():
        args = [values[ref] for ref in node.inputs]
        try:
            if node.op == "input":
                value, entry = x, _SavedEntry()
            elif node.op == "output":
                value, entry = args[0], _SavedEntry()
                out_value = value
            elif node.op == "identity":
                value, entry = args[0], _SavedEntry()
            elif node.op == "relu":
                value, entry = relu_forward(args[0]), _SavedEntry({"X": args[0]})
            elif node.op == "add":
                if args[0].shape != args[1].shape:
                    raise ShapeError(f"add operands {args[0].shape} vs {args[1].shape}")
                value, entry = args[0] + args[1], _SavedEntry()
            elif node.op == "global_avg_pool":
                value = global_avg_pool_forward(args[0])
                entry = _SavedEntry(in_shape=args[0].shape)
            elif node.op == "linear":
                value = linear_forward(args[0], g.params[f"{node.param}.weight"],
                                       g.params.get(f"{node.param}.bias"))
                entry = _SavedEntry({"X": args[0]})
            elif node.op == "conv2d":
                value, entry = _conv_forward_node(g, node, args[0])
            elif node.op == "bn2d":
                value, entry = _bn_forward_node(g, node, args[0], stat_updates)
            else:
                raise ModeError(f"op '{node.op}' is matched but not executable (2D only)")
        except (ShapeError, ModeError) as exc:
            raise type(exc)(f"node '{node.id}': {exc}") from None
        values[node.id] = value
        saved[node.id] = entry
    return out_value, saved, stat_updates


def _conv_forward_node(g: Graph, node: Node, x):
    p = _conv_params(g, node)
    cb_mode = node.attrs.get("convbn_mode")
    if cb_mode == Mode.TUNE.value:
        bp = node.attrs["bn_param"]
        w_fused, b_fused = fuse_params(
            p.weight, p.bias, g.params[f"{bp}.gamma"], g.params[f"{bp}.beta"],
            g.params[f"{bp}.running_mean"], g.params[f"{bp}.running_var"],
            float(node.attrs["bn_eps"]),
        )
        z = conv2d_forward(x, ConvParams(w_fused, b_fused, p.stride, p.padding))
        return z, _SavedEntry({"X": x, "w_fused": w_fused, "b_fused": b_fused})
    return conv2d_forward(x, p), _SavedEntry({"X": x})


def _bn_forward_node(g: Graph, node: Node, y, stat_updates):
    p = _bn_params(g, node.param, node.attrs)
    if node.attrs.get("mode", "eval") == "train":
        z, xhat, stats, (new_mean, new_var) = bn_train_forward_full(y, p)
        stat_updates[f"{node.param}.running_mean"] = new_mean
        stat_updates[f"{node.param}.running_var"] = new_var
        return z, _SavedEntry({"xhat": xhat, "mean": stats.mean, "var": stats.var})
    return bn_eval_forward(y, p), _SavedEntry({"Y": y})


def execute_backward(g: Graph, saved, d_out):
    """Reverse sweep; returns (d_input, grads by parameter name).

    Gradients fan in to multi-user nodes in reverse topological order of the
    consumers, which is deterministic for a given graph.
    """
    order = g._ordered_nodes()
    out_id = next(n.id for n in order if n.op == "output")
    node_grads = {out_id: d_out}
    grads = {}

    def _acc(key, value):
        grads[key] = grads[key] + value if key in grads else value

    def _push(ref, value):
        node_grads[ref] = node_grads[ref] + value if ref in node_grads else value

    d_input = None
    for node in reversed(order):
        gout = node_grads.get(node.id)
        if gout is None:
            continue
        entry = saved[node.id]
        if node.op == "input":
            d_input = gout
        elif node.op in ("output", "identity"):
            _push(node.inputs[0], gout)
        elif node.op == "relu":
            _push(node.inputs[0], relu_backward(gout, entry.tensors["X"]))
        elif node.op == "add":
            _push(node.inputs[0], gout)
            _push(node.inputs[1], gout)
        elif node.op == "global_avg_pool":
            _push(node.inputs[0], global_avg_pool_backward(gout, entry.meta["in_shape"]))
        elif node.op == "linear":
            dx, dw, db = linear_backward(gout, entry.tensors["X"],
                                         g.params[f"{node.param}.weight"])
            _acc(f"{node.param}.weight", dw)
            if f"{node.param}.bias" in g.params:
                _acc(f"{node.param}.bias", db)
            _push(node.inputs[0], dx)
        elif node.op == "conv2d":
            _conv_backward_node(g, node, entry, gout, _acc, _push)
        elif node.op == "bn2d":
            _bn_backward_node(g, node, entry, gout, _acc, _push)
        else:
            raise ModeError(f"node '{node.id}': op '{node.op}' is not executable")
    return d_input, grads


def _conv_backward_node(g: Graph, node: Node, entry, gout, _acc, _push):
    p = _conv_params(g, node)
    x = entry.tensors["X"]
    cb_mode = node.attrs.get("convbn_mode")
    if cb_mode == Mode.TUNE.value:
        bp = node.attrs["bn_param"]
        fused = ConvParams(entry.tensors["w_fused"], entry.tensors["b_fused"],
                           p.stride, p.padding)
        dx, dw_fused, db_fused = conv2d_backward(x, fused, gout)
        gamma = g.params[f"{bp}.gamma"]
        var = g.params[f"{bp}.running_var"]
        mean = g.params[f"{bp}.running_mean"]
        inv = 1.0 / np.sqrt(var + np.asarray(float(node.attrs["bn_eps"]), dtype=x.dtype))
        coef = gamma * inv
        _acc(f"{node.param}.weight", dw_fused * coef.reshape(-1, 1, 1, 1))
        if f"{node.param}.bias" in g.params:
            _acc(f"{node.param}.bias", db_fused * coef)
        b0 = np.zeros_like(gamma) if p.bias is None else p.bias
        dgamma = (
            (dw_fused * p.weight).sum(axis=(1, 2, 3), dtype=np.float64).astype(x.dtype) * inv
            + db_fused * (b0 - mean) * inv
        )
        _acc(f"{bp}.gamma", dgamma)
        _acc(f"{bp}.beta", db_fused)
    else:
        dx, dw, db = conv2d_backward(x, p, gout)
        _acc(f"{node.param}.weight", dw)
        if f"{node.param}.bias" in g.params:
            _acc(f"{node.param}.bias", db)
    _push(node.inputs[0], dx)


def _bn_backward_node(g: Graph, node: Node, entry, gout, _acc, _push):
    p = _bn_params(g, node.param, node.attrs)
    if node.attrs.get("mode", "eval") == "train":
        stats = BatchStats(entry.tensors["mean"], entry.tensors["var"])
        dy, dgamma, dbeta = _bn_train_backward_xhat(gout, entry.tensors["xhat"], stats, p)
    else:
        dy, dgamma, dbeta = bn_eval_backward(gout, entry.tensors["Y"], p)
    _acc(f"{node.param}.gamma", dgamma)
    _acc(f"{node.param}.beta", dbeta)
    _push(node.inputs[0], dy)
