"""Verification suites: mode equivalences, fusion relations, broadcast
adjoint, finite-difference gradient checks, and the one-step instability
quantification.

Every suite runs seeded random instances and returns a plain dict with the
measured extremum, its tolerance, and the seeds of failing instances, so
reports serialize deterministically.
"""

from __future__ import annotations

import numpy as np

from .block import ConvBNBlock, Mode, backward, forward, fuse_params, scaling_coefficients, to_deploy
from .fixtures import random_block
from .ops import (
    BatchStats,
    BNParams,
    ConvParams,
    bn_eval_backward,
    bn_eval_forward,
    bn_train_backward,
    bn_train_forward,
    conv2d_backward,
    conv2d_forward,
    global_avg_pool_backward,
    global_avg_pool_forward,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    softmax_xent,
)
from .tensor import Rng, broadcast_to, reduce_to

FD_STEP = 1e-5


def rel_err(a, b, floor=1.0):
    """max_i |a_i - b_i| / max(|b_i|, floor): relative where b is large,
    absolute where it vanishes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor))) if a.size else 0.0


def max_abs(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def _suite(name, metric, tolerance, values):
    failing = [seed for seed, v in values if not v <= tolerance]
    worst = max((v for _, v in values), default=0.0)
    return {
        "name": name,
        "metric": metric,
        "instances": len(values),
        "max_value": worst,
        "tolerance": tolerance,
        "passed": not failing,
        "failing_seeds": failing,
    }


# -- forward/backward equivalence suites -------------------------------------


def eval_tune_forward_suite(instances=50, seed=1000, tolerance=1e-10,
                            inject_fault_at=None):
    values = []
    for i in range(instances):
        inst_seed = seed + i
        block, x, _ = random_block(Rng(inst_seed))
        z_eval, _, _ = forward(block, x, mode=Mode.EVAL)
        z_tune, saved, _ = forward(block, x, mode=Mode.TUNE)
        if inject_fault_at is not None and i == inject_fault_at:
            z_tune = z_tune + 1e-3  # self-test fault: perturbed fused output
        values.append((inst_seed, max_abs(z_eval, z_tune)))
    report = _suite("eval_tune_forward", "max_abs_diff", tolerance, values)
    if inject_fault_at is not None:
        report["injected_fault"] = f"instance seed {seed + inject_fault_at} (w_fused path)"
    return report


def eval_tune_backward_suite(instances=50, seed=2000, tolerance=1e-9):
    values = []
    for i in range(instances):
        inst_seed = seed + i
        block, x, dz = random_block(Rng(inst_seed))
        _, s_eval, _ = forward(block, x, mode=Mode.EVAL)
        _, s_tune, _ = forward(block, x, mode=Mode.TUNE)
        block.mode = Mode.EVAL
        g_eval = backward(block, s_eval, dz)
        block.mode = Mode.TUNE
        g_tune = backward(block, s_tune, dz)
        worst = max(rel_err(g_tune[k], g_eval[k]) for k in ("x", "weight", "bias", "gamma", "beta"))
        values.append((inst_seed, worst))
    return _suite("eval_tune_backward", "max_rel_err", tolerance, values)


def deploy_forward_suite(instances=50, seed=3000, tolerance=1e-10):
    values = []
    for i in range(instances):
        inst_seed = seed + i
        block, x, _ = random_block(Rng(inst_seed))
        z_eval, _, _ = forward(block, x, mode=Mode.EVAL)
        z_dep, _, _ = forward(to_deploy(block), x)
        values.append((inst_seed, max_abs(z_eval, z_dep)))
    return _suite("deploy_forward", "max_abs_diff", tolerance, values)


def deploy_scaling_suite(instances=50, seed=4000, tolerance=1e-10):
    """Table-1 relation: dw_deploy * c == dw_eval per output channel, and
    db_deploy * c == db_eval."""
    values = []
    for i in range(instances):
        inst_seed = seed + i
        block, x, dz = random_block(Rng(inst_seed))
        _, s_eval, _ = forward(block, x, mode=Mode.EVAL)
        block.mode = Mode.EVAL
        g_eval = backward(block, s_eval, dz)
        dep = to_deploy(block)
        _, s_dep, _ = forward(dep, x)
        g_dep = backward(dep, s_dep, dz)
        c = scaling_coefficients(block)
        worst = max(
            rel_err(g_dep["weight"] * c.reshape(-1, 1, 1, 1), g_eval["weight"]),
            rel_err(g_dep["bias"] * c, g_eval["bias"]),
        )
        values.append((inst_seed, worst))
    return _suite("deploy_gradient_scaling", "max_rel_err", tolerance, values)


def associativity_suite(instances=100, seed=5000, tolerance=1e-10):
    """gamma * (w (*) X) == (gamma * w) (*) X for bias-free convs."""
    values = []
    for i in range(instances):
        inst_seed = seed + i
        rng = Rng(inst_seed)
        block, x, _ = random_block(rng, with_bias=False)
        gamma = rng.uniform((block.conv.out_channels,), 0.25, 4.0)
        p = ConvParams(block.conv.weight, None, block.conv.stride, block.conv.padding)
        lhs = gamma.reshape(1, -1, 1, 1) * conv2d_forward(x, p)
        scaled = ConvParams(block.conv.weight * gamma.reshape(-1, 1, 1, 1), None,
                            block.conv.stride, block.conv.padding)
        rhs = conv2d_forward(x, scaled)
        values.append((inst_seed, max_abs(lhs, rhs)))
    return _suite("conv_affine_associativity", "max_abs_diff", tolerance, values)


def broadcast_adjoint_suite(instances=200, seed=6000, tolerance=1e-10):
    """dot(broadcast_to(v, S), u) == dot(v, reduce_to(u, shape(v)))."""
    values = []
    for i in range(instances):
        inst_seed = seed + i
        rng = Rng(inst_seed)
        rank = rng.integers(1, 5)
        full = tuple(int(rng.integers(1, 6)) for _ in range(rank))
        keep = rng.integers(0, rank + 1)
        small = tuple(e if rng.next_f64() < 0.6 else 1 for e in full[rank - keep:]) if keep else ()
        u = rng.normal(full)
        v = rng.normal(small) if small else rng.normal((1,)).reshape(())
        lhs = float(np.sum(broadcast_to(v, full) * u))
        rhs = float(np.sum(v * reduce_to(u, v.shape)))
        values.append((inst_seed, abs(lhs - rhs)))
    return _suite("broadcast_adjoint", "abs_diff", tolerance, values)


def verify_all(instances=50, seed=0, inject_fault=False):
    """The cmd_verify bundle; pass iff every sub-suite passes."""
    suites = [
        eval_tune_forward_suite(instances, seed + 1000,
                                inject_fault_at=3 if inject_fault else None),
        eval_tune_backward_suite(instances, seed + 2000),
        deploy_forward_suite(instances, seed + 3000),
        deploy_scaling_suite(instances, seed + 4000),
        associativity_suite(max(100, instances), seed + 5000),
        broadcast_adjoint_suite(max(200, instances), seed + 6000),
    ]
    return {"checks": suites, "passed": all(s["passed"] for s in suites)}


# -- finite differences -------------------------------------------------------


def fd_gradient(f, x, h=FD_STEP):
    """Central differences of scalar-valued f at tensor x, elementwise."""
    x = np.array(x, dtype=np.float64)  # private copy; f sees the perturbed copy
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def _weighted_loss(r):
    return lambda out: float(np.sum(out * r))


def gradcheck_conv(seed, tolerance=1e-5):
    rng = Rng(seed)
    block, x, _ = random_block(rng, with_bias=True, max_channels=3, max_hw=6)
    p = block.conv
    r = rng.normal(conv2d_forward(x, p).shape)
    loss = _weighted_loss(r)
    dx, dw, db = conv2d_backward(x, p, r)
    errs = [
        rel_err(dx, fd_gradient(lambda t: loss(conv2d_forward(t, p)), x)),
        rel_err(dw, fd_gradient(
            lambda t: loss(conv2d_forward(x, ConvParams(t, p.bias, p.stride, p.padding))), p.weight)),
        rel_err(db, fd_gradient(
            lambda t: loss(conv2d_forward(x, ConvParams(p.weight, t, p.stride, p.padding))), p.bias)),
    ]
    return max(errs)


def gradcheck_bn_eval(seed, tolerance=1e-5):
    rng = Rng(seed)
    block, x, _ = random_block(rng)
    bn = block.bn
    y = rng.normal((2, bn.gamma.size, 5, 5))
    r = rng.normal(y.shape)
    loss = _weighted_loss(r)
    dy, dgamma, dbeta = bn_eval_backward(r, y, bn)

    def with_bn(gamma=None, beta=None):
        q = BNParams(gamma if gamma is not None else bn.gamma,
                     beta if beta is not None else bn.beta,
                     bn.running_mean, bn.running_var, bn.eps, bn.momentum)
        return q

    errs = [
        rel_err(dy, fd_gradient(lambda t: loss(bn_eval_forward(t, bn)), y)),
        rel_err(dgamma, fd_gradient(lambda t: loss(bn_eval_forward(y, with_bn(gamma=t))), bn.gamma)),
        rel_err(dbeta, fd_gradient(lambda t: loss(bn_eval_forward(y, with_bn(beta=t))), bn.beta)),
    ]
    return max(errs)


def gradcheck_bn_train(seed, tolerance=1e-5):
    rng = Rng(seed)
    block, _, _ = random_block(rng)
    bn = block.bn
    y = rng.normal((2, bn.gamma.size, 5, 5))
    r = rng.normal(y.shape)
    loss = _weighted_loss(r)
    z, stats, _ = bn_train_forward(y, bn)
    dy, dgamma, dbeta = bn_train_backward(r, y, stats, bn)

    def fwd(t=None, gamma=None, beta=None):
        q = BNParams(gamma if gamma is not None else bn.gamma,
                     beta if beta is not None else bn.beta,
                     bn.running_mean, bn.running_var, bn.eps, bn.momentum)
        out, _, _ = bn_train_forward(t if t is not None else y, q)
        return loss(out)

    errs = [
        rel_err(dy, fd_gradient(lambda t: fwd(t=t), y)),
        rel_err(dgamma, fd_gradient(lambda t: fwd(gamma=t), bn.gamma)),
        rel_err(dbeta, fd_gradient(lambda t: fwd(beta=t), bn.beta)),
    ]
    return max(errs)


def gradcheck_aux(seed, tolerance=1e-5):
    rng = Rng(seed)
    x = rng.normal((3, 4, 5, 5))
    x += 0.2 * np.sign(x)  # keep elements away from the relu kink
    r = rng.normal(x.shape)
    errs = [rel_err(relu_backward(r, x), fd_gradient(lambda t: float(np.sum(relu_forward(t) * r)), x))]

    rp = rng.normal((3, 4))
    errs.append(rel_err(
        global_avg_pool_backward(rp, x.shape),
        fd_gradient(lambda t: float(np.sum(global_avg_pool_forward(t) * rp)), x)))

    xin = rng.normal((3, 6))
    w = rng.normal((4, 6))
    b = rng.normal((4,))
    rl = rng.normal((3, 4))
    dx, dw, db = linear_backward(rl, xin, w)
    errs += [
        rel_err(dx, fd_gradient(lambda t: float(np.sum(linear_forward(t, w, b) * rl)), xin)),
        rel_err(dw, fd_gradient(lambda t: float(np.sum(linear_forward(xin, t, b) * rl)), w)),
        rel_err(db, fd_gradient(lambda t: float(np.sum(linear_forward(xin, w, t) * rl)), b)),
    ]

    logits = rng.normal((4, 5))
    labels = rng.integers(0, 5, (4,))
    _, dlogits = softmax_xent(logits, labels)
    errs.append(rel_err(dlogits, fd_gradient(lambda t: softmax_xent(t, labels)[0], logits)))
    return max(errs)


def gradcheck_block_mode(seed, mode, tolerance=1e-5):
    rng = Rng(seed)
    block, x, _ = random_block(rng, with_bias=True, max_channels=3, max_hw=6)
    if mode is Mode.DEPLOY:
        block = to_deploy(block)
    else:
        block.mode = mode
    z, saved, _ = forward(block, x)
    r = rng.normal(z.shape)
    loss = _weighted_loss(r)
    grads = backward(block, saved, r)

    def run(weight=None, bias=None, gamma=None, beta=None, xin=None):
        conv = ConvParams(weight if weight is not None else block.conv.weight,
                          bias if bias is not None else block.conv.bias,
                          block.conv.stride, block.conv.padding)
        bn = block.bn
        if bn is not None and (gamma is not None or beta is not None):
            bn = BNParams(gamma if gamma is not None else bn.gamma,
                          beta if beta is not None else bn.beta,
                          bn.running_mean, bn.running_var, bn.eps, bn.momentum)
        b2 = ConvBNBlock(conv=conv, bn=bn, mode=block.mode)
        out, _, _ = forward(b2, xin if xin is not None else x)
        return loss(out)

    errs = [
        rel_err(grads["x"], fd_gradient(lambda t: run(xin=t), x)),
        rel_err(grads["weight"], fd_gradient(lambda t: run(weight=t), block.conv.weight)),
        rel_err(grads["bias"], fd_gradient(lambda t: run(bias=t), block.conv.bias)),
    ]
    if mode is not Mode.DEPLOY:
        errs.append(rel_err(grads["gamma"], fd_gradient(lambda t: run(gamma=t), block.bn.gamma)))
        errs.append(rel_err(grads["beta"], fd_gradient(lambda t: run(beta=t), block.bn.beta)))
    return max(errs)


def gradcheck_all(instances=20, seed=9000, tolerance=1e-5):
    """cmd_gradcheck: every backward op and every block mode vs FD."""
    suites = []
    per_op = [
        ("conv2d", gradcheck_conv),
        ("bn_eval", gradcheck_bn_eval),
        ("bn_train", gradcheck_bn_train),
        ("aux_layers", gradcheck_aux),
    ]
    for name, fn in per_op:
        values = [(seed + i, fn(seed + i)) for i in range(instances)]
        suites.append(_suite(f"gradcheck_{name}", "max_rel_err", tolerance, values))
    for mode in (Mode.EVAL, Mode.TUNE, Mode.DEPLOY, Mode.TRAIN):
        values = [
            (seed + 100 + i, gradcheck_block_mode(seed + 100 + i, mode))
            for i in range(instances)
        ]
        suites.append(_suite(f"gradcheck_block_{mode.value}", "max_rel_err", tolerance, values))
    return {"checks": suites, "passed": all(s["passed"] for s in suites)}


# -- one-step instability quantification --------------------------------------


def stability_multistep(coeffs, steps=100, lr=0.05, seed=7100, batch=16, size=16):
    """Train Eval vs Deploy from the identical fused state and compare.

    The first ConvBN block carries the requested per-channel scaling
    coefficients.  Only the conv weight and the linear head are trained (BN
    affine parameters and biases are frozen on both sides) so the comparison
    isolates the weight-gradient scaling; this also makes c = 1 collapse to
    bit-near-identical trajectories.
    """
    from .fixtures import make_blob_dataset
    from .graph import Graph, Node, execute_backward, execute_forward, turn_on
    from .ops import softmax_xent
    from .train import SGD

    coeffs = np.asarray(coeffs, dtype=np.float64)
    if np.any(coeffs == 0):
        raise ValueError("scaling coefficient 0 is rejected (Deploy gradient undefined)")
    rng = Rng(seed)
    c_out = coeffs.size
    classes = 4
    eps = 1e-5
    var = rng.uniform((c_out,), 0.5, 1.5)
    params = {
        "c1.weight": rng.normal((c_out, 3, 3, 3), 0.0, 27 ** -0.5),
        "b1.gamma": coeffs * np.sqrt(var + eps),
        "b1.beta": rng.normal((c_out,), 0.0, 0.3),
        "b1.running_mean": rng.normal((c_out,), 0.0, 0.5),
        "b1.running_var": var,
        "fc.weight": rng.normal((classes, c_out), 0.0, c_out ** -0.5),
        "fc.bias": np.zeros(classes),
    }
    nodes = [
        Node("in", "input", []),
        Node("c1", "conv2d", ["in"], "c1", {"stride": [1, 1], "padding": [1, 1]}),
        Node("b1", "bn2d", ["c1"], "b1", {"eps": eps, "momentum": 0.1, "mode": "eval"}),
        Node("r1", "relu", ["b1"]),
        Node("pool", "global_avg_pool", ["r1"]),
        Node("fc", "linear", ["pool"], "fc"),
        Node("out", "output", ["fc"]),
    ]
    g_eval = Graph(nodes, params)
    g_dep = g_eval.copy()
    turn_on(g_dep, Mode.DEPLOY)
    trainable = ["c1.weight", "fc.weight", "fc.bias"]

    images, labels = make_blob_dataset(seed + 1, max(batch * 4, 64), 3, size, classes, "f64")
    runs = {}
    grad_norms = {}
    rel_updates = {}
    for name, g in (("eval", g_eval), ("deploy", g_dep)):
        opt = SGD(lr)
        losses = []
        for step in range(steps):
            idx = (np.arange(batch) + step * batch) % images.shape[0]
            x, y = images[idx], labels[idx]
            logits, saved, _ = execute_forward(g, x)
            loss, dlogits = softmax_xent(logits, y)
            _, grads = execute_backward(g, saved, dlogits)
            if step == 0:
                w = g.params["c1.weight"]
                w_grad = grads["c1.weight"]
                norms = np.sqrt(np.sum(w_grad ** 2, axis=(1, 2, 3)))
                wnorms = np.sqrt(np.sum(w ** 2, axis=(1, 2, 3)))
                grad_norms[name] = norms.tolist()
                rel_updates[name] = (lr * norms / wnorms).tolist()
            opt.step(g.params, grads, trainable)
            losses.append(loss)
        runs[name] = losses

    def dispersion(values):
        v = np.asarray(values)
        return float(v.std() / v.mean()) if v.mean() > 0 else 0.0

    return {
        "coeffs": coeffs.tolist(),
        "steps": steps,
        "lr": lr,
        "losses_eval": runs["eval"],
        "losses_deploy": runs["deploy"],
        "max_loss_gap": float(np.max(np.abs(np.asarray(runs["eval"]) - np.asarray(runs["deploy"])))),
        "grad_norm_per_channel": grad_norms,
        "grad_norm_dispersion": {k: dispersion(v) for k, v in grad_norms.items()},
        # relative update magnitude lr*|g| / |w| per channel: in Deploy it
        # carries the 1/c^2 mismatch that destabilizes training
        "relative_update_per_channel": rel_updates,
        "relative_update_dispersion": {k: dispersion(v) for k, v in rel_updates.items()},
    }


def coefficient_histogram(tensors, bins=30, default_eps=1e-5):
    """Per-layer and pooled histograms of c = gamma * rsqrt(var + eps) from a
    CBNT stats export ('<layer>.gamma' / '<layer>.running_var', optional
    rank-0 '<layer>.eps')."""
    from .errors import InputError

    layers = sorted(n[: -len(".gamma")] for n in tensors if n.endswith(".gamma"))
    if not layers:
        raise InputError(
            "no '<layer>.gamma' entries found; expected '<layer>.gamma' and "
            "'<layer>.running_var' pairs"
        )
    missing = [f"{l}.running_var" for l in layers if f"{l}.running_var" not in tensors]
    if missing:
        raise InputError(f"missing tensors: {missing}")
    per_layer = {}
    pooled = []
    for layer in layers:
        gamma = tensors[f"{layer}.gamma"]
        var = tensors[f"{layer}.running_var"]
        eps = float(tensors[f"{layer}.eps"]) if f"{layer}.eps" in tensors else default_eps
        c = gamma / np.sqrt(var + eps)
        pooled.append(np.asarray(c, dtype=np.float64).ravel())
        per_layer[layer] = _hist_summary(c, bins)
    return {
        "layers": per_layer,
        "pooled": _hist_summary(np.concatenate(pooled), bins),
    }


def _hist_summary(values, bins):
    v = np.asarray(values, dtype=np.float64).ravel()
    counts, edges = np.histogram(v, bins=bins)
    qs = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {
        "count": int(v.size),
        "min": float(qs[0]),
        "q25": float(qs[1]),
        "median": float(qs[2]),
        "q75": float(qs[3]),
        "max": float(qs[4]),
        "hist_counts": counts.tolist(),
        "hist_edges": edges.tolist(),
    }


def one_step_update_ratio(coeffs, lr=0.1, seed=7000):
    """Effective fused-weight change after one SGD step on the raw weight
    (Eval parametrization) versus one step on the fused weight (Deploy).

    With per-channel scaling coefficient c the exact ratio is c^2: the raw
    update is c * dw_fused, and re-fusing multiplies by c again.  BN affine
    parameters are held fixed for the probe.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if np.any(coeffs == 0):
        raise ValueError("scaling coefficient 0 is rejected (Deploy gradient undefined)")
    rng = Rng(seed)
    c_out = coeffs.size
    c_in, k, n, hw = 3, 3, 2, 8
    weight = rng.normal((c_out, c_in, k, k), 0.0, (c_in * k * k) ** -0.5)
    bias = rng.normal((c_out,), 0.0, 0.2)
    var = rng.uniform((c_out,), 0.5, 1.5)
    eps = 1e-5
    gamma = coeffs * np.sqrt(var + eps)
    bn = BNParams(gamma, rng.normal((c_out,), 0.0, 0.3),
                  rng.normal((c_out,), 0.0, 0.5), var, eps=eps)
    conv = ConvParams(weight, bias, (1, 1), (1, 1))
    block = ConvBNBlock(conv=conv, bn=bn, mode=Mode.EVAL)
    x = rng.normal((n, c_in, hw, hw))
    dz = rng.normal((n, c_out, hw, hw))

    _, s_eval, _ = forward(block, x)
    g_eval = backward(block, s_eval, dz)
    dep = to_deploy(block)
    _, s_dep, _ = forward(dep, x)
    g_dep = backward(dep, s_dep, dz)

    c = scaling_coefficients(block)
    w_fused0 = dep.conv.weight
    w_eval_new = weight - lr * g_eval["weight"]
    w_fused_eval = w_eval_new * c.reshape(-1, 1, 1, 1)
    delta_eval = w_fused_eval - w_fused0
    delta_dep = (w_fused0 - lr * g_dep["weight"]) - w_fused0

    norms_eval = np.sqrt(np.sum(delta_eval ** 2, axis=(1, 2, 3)))
    norms_dep = np.sqrt(np.sum(delta_dep ** 2, axis=(1, 2, 3)))
    measured = norms_eval / norms_dep
    expected = coeffs ** 2
    return {
        "coeffs": coeffs.tolist(),
        "expected_ratio": expected.tolist(),
        "measured_ratio": measured.tolist(),
        "max_rel_err": float(np.max(np.abs(measured - expected) / expected)),
    }
