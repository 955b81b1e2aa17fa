"""Bundled graphs, random ConvBN instances and the synthetic dataset.

Everything here is deterministic given a seed; parameter tensors are drawn
from the package PRNG so fixtures are identical across runs and platforms.
"""

from __future__ import annotations

import numpy as np

from .block import ConvBNBlock, Mode
from .graph import Graph, Node
from .ops import BNParams, ConvParams
from .tensor import Rng, dtype_of


def _conv_init(rng, params, prefix, c_in, c_out, k, dtype, bias=True):
    fan_in = c_in * k * k
    params[f"{prefix}.weight"] = rng.normal(
        (c_out, c_in, k, k), 0.0, fan_in ** -0.5, dtype=dtype)
    if bias:
        params[f"{prefix}.bias"] = rng.normal((c_out,), 0.0, 0.1, dtype=dtype)


def _bn_init(rng, params, prefix, c, dtype):
    params[f"{prefix}.gamma"] = rng.uniform((c,), 0.5, 1.5, dtype=dtype)
    params[f"{prefix}.beta"] = rng.normal((c,), 0.0, 0.3, dtype=dtype)
    params[f"{prefix}.running_mean"] = rng.normal((c,), 0.0, 0.5, dtype=dtype)
    params[f"{prefix}.running_var"] = rng.uniform((c,), 0.5, 1.5, dtype=dtype)


def _conv_node(nid, src, param, stride=1, padding=1):
    return Node(nid, "conv2d", [src], param,
                {"stride": [stride, stride], "padding": [padding, padding]})


def _bn_node(nid, src, param, mode="eval"):
    return Node(nid, "bn2d", [src], param, {"eps": 1e-5, "momentum": 0.1, "mode": mode})


def seven_pattern_graph(seed=0, dtype="f64", in_channels=3, width=8, classes=4):
    """Matcher-coverage fixture: 7 convs, of which 5 form eligible pairs,
    one feeds both its BN and a skip-add (multi consumer), one is bare."""
    dt = dtype_of(dtype)
    rng = Rng(seed)
    params = {}
    nodes = [Node("in", "input", [])]

    def pair(i, src, c_in):
        _conv_init(rng, params, f"c{i}", c_in, width, 3, dt, bias=False)
        _bn_init(rng, params, f"b{i}", width, dt)
        nodes.append(_conv_node(f"c{i}", src, f"c{i}"))
        nodes.append(_bn_node(f"b{i}", f"c{i}", f"b{i}"))
        return f"b{i}"

    top = pair(1, "in", in_channels)
    nodes.append(Node("r1", "relu", [top]))
    top = pair(2, "r1", width)
    nodes.append(Node("r2", "relu", [top]))
    top = pair(3, "r2", width)
    # c4 feeds both its BN and the residual add: multi_consumer skip
    top = pair(4, top, width)
    nodes.append(Node("a4", "add", [top, "c4"]))
    top = pair(5, "a4", width)
    top = pair(6, top, width)
    # bare conv: no BN follower
    _conv_init(rng, params, "c7", width, width, 3, dt, bias=True)
    nodes.append(_conv_node("c7", top, "c7"))
    nodes.append(Node("pool", "global_avg_pool", ["c7"]))
    params["fc.weight"] = rng.normal((classes, width), 0.0, width ** -0.5, dtype=dt)
    params["fc.bias"] = rng.normal((classes,), 0.0, 0.1, dtype=dt)
    nodes.append(Node("fc", "linear", ["pool"], "fc"))
    nodes.append(Node("out", "output", ["fc"]))
    return Graph(nodes, params)


def five_eligible_graph(seed=0, dtype="f64", in_channels=3, width=8):
    """Chain of five eligible ConvBN pairs with relus between; no skips, so a
    Deploy rewrite leaves no bn2d node behind."""
    dt = dtype_of(dtype)
    rng = Rng(seed)
    params = {}
    nodes = [Node("in", "input", [])]
    top = "in"
    c_in = in_channels
    for i in range(1, 6):
        _conv_init(rng, params, f"c{i}", c_in, width, 3, dt, bias=(i % 2 == 0))
        _bn_init(rng, params, f"b{i}", width, dt)
        nodes.append(_conv_node(f"c{i}", top, f"c{i}"))
        nodes.append(_bn_node(f"b{i}", f"c{i}", f"b{i}"))
        top = f"b{i}"
        if i < 5:
            nodes.append(Node(f"r{i}", "relu", [top]))
            top = f"r{i}"
        c_in = width
    nodes.append(Node("out", "output", [top]))
    return Graph(nodes, params)


def toy_net_graph(seed=0, dtype="f64", in_channels=3, width=8, classes=4, bn_mode="eval"):
    """conv-bn-relu x2 -> pool -> linear, the desk-scale training network."""
    dt = dtype_of(dtype)
    rng = Rng(seed)
    params = {}
    nodes = [Node("in", "input", [])]
    _conv_init(rng, params, "c1", in_channels, width, 3, dt, bias=False)
    _bn_init(rng, params, "b1", width, dt)
    nodes += [_conv_node("c1", "in", "c1"), _bn_node("b1", "c1", "b1", bn_mode),
              Node("r1", "relu", ["b1"])]
    _conv_init(rng, params, "c2", width, width, 3, dt, bias=False)
    _bn_init(rng, params, "b2", width, dt)
    nodes += [_conv_node("c2", "r1", "c2"), _bn_node("b2", "c2", "b2", bn_mode),
              Node("r2", "relu", ["b2"])]
    nodes.append(Node("pool", "global_avg_pool", ["r2"]))
    params["fc.weight"] = rng.normal((classes, width), 0.0, width ** -0.5, dtype=dt)
    params["fc.bias"] = rng.normal((classes,), 0.0, 0.1, dtype=dt)
    nodes += [Node("fc", "linear", ["pool"], "fc"), Node("out", "output", ["fc"])]
    return Graph(nodes, params)


def bench_graph(seed=0, dtype="f32", in_channels=3, width=3, layers=10):
    """Timing fixture: a deep, thin ConvBN stack alternating 3x3 and 1x1
    kernels, echoing the many-thin-layers profile of real backbones.  Many
    sites with modest per-site compute keep the per-site mode overhead (the
    quantity the timing comparison resolves) above the noise floor."""
    dt = dtype_of(dtype)
    rng = Rng(seed)
    params = {}
    nodes = [Node("in", "input", [])]
    top = "in"
    c_in = in_channels
    for i in range(1, layers + 1):
        k = 3 if i % 2 else 1
        _conv_init(rng, params, f"c{i}", c_in, width, k, dt, bias=False)
        _bn_init(rng, params, f"b{i}", width, dt)
        nodes.append(_conv_node(f"c{i}", top, f"c{i}", padding=k // 2))
        nodes.append(_bn_node(f"b{i}", f"c{i}", f"b{i}"))
        top = f"b{i}"
        c_in = width
    nodes.append(Node("out", "output", [top]))
    return Graph(nodes, params)


def mixed_dim_graph():
    """conv1d/conv3d pairs around an eligible conv2d pair; exercises the
    unsupported_dim skip reason.  Not executable (2D executor only)."""
    params = {
        "k1.weight": np.zeros((4, 3, 3), dtype=np.float64),
        "k2.weight": np.zeros((4, 4, 3, 3), dtype=np.float64),
        "k3.weight": np.zeros((4, 4, 3, 3, 3), dtype=np.float64),
    }
    for i in (1, 2, 3):
        for f, v in (("gamma", 1.0), ("beta", 0.0), ("running_mean", 0.0), ("running_var", 1.0)):
            params[f"n{i}.{f}"] = np.full(4, v, dtype=np.float64)
    nodes = [
        Node("in", "input", []),
        Node("k1", "conv1d", ["in"], "k1"),
        Node("n1", "bn1d", ["k1"], "n1"),
        Node("k2", "conv2d", ["n1"], "k2", {"stride": [1, 1], "padding": [1, 1]}),
        Node("n2", "bn2d", ["k2"], "n2", {"eps": 1e-5, "momentum": 0.1, "mode": "eval"}),
        Node("k3", "conv3d", ["n2"], "k3"),
        Node("n3", "bn3d", ["k3"], "n3"),
        Node("out", "output", ["n3"]),
    ]
    return Graph(nodes, params)


def resnet50_stack_graph(dtype="f32"):
    """ResNet-50-shaped ConvBN stack for analytic memory accounting.

    Pooling-free variant: the max-pool's spatial reduction is absorbed into
    the first block of stage 1 (stride 2), so every later shape matches the
    standard network.  Residual adds and downsample ConvBN pairs are wired
    as in the original; parameters are zero-initialized (the fixture is
    never executed, only shape-inferred).
    """
    dt = dtype_of(dtype)
    params = {}
    nodes = [Node("in", "input", [])]
    idx = [0]

    def convbn(src, c_in, c_out, k, stride):
        idx[0] += 1
        cname, bname = f"c{idx[0]}", f"b{idx[0]}"
        params[f"{cname}.weight"] = np.zeros((c_out, c_in, k, k), dtype=dt)
        params[f"{bname}.gamma"] = np.ones(c_out, dtype=dt)
        params[f"{bname}.beta"] = np.zeros(c_out, dtype=dt)
        params[f"{bname}.running_mean"] = np.zeros(c_out, dtype=dt)
        params[f"{bname}.running_var"] = np.ones(c_out, dtype=dt)
        nodes.append(_conv_node(cname, src, cname, stride=stride, padding=k // 2))
        nodes.append(_bn_node(bname, cname, bname))
        return bname

    top = convbn("in", 3, 64, 7, 2)
    c_in = 64
    aidx = 0
    for mid, blocks in ((64, 3), (128, 4), (256, 6), (512, 3)):
        for b in range(blocks):
            stride = 2 if b == 0 else 1
            if b == 0:
                shortcut = convbn(top, c_in, mid * 4, 1, stride)
            else:
                shortcut = top
            t = convbn(top, c_in, mid, 1, stride)
            t = convbn(t, mid, mid, 3, 1)
            t = convbn(t, mid, mid * 4, 1, 1)
            aidx += 1
            nodes.append(Node(f"a{aidx}", "add", [t, shortcut]))
            top = f"a{aidx}"
            c_in = mid * 4
    nodes.append(Node("pool", "global_avg_pool", [top]))
    params["fc.weight"] = np.zeros((10, 2048), dtype=dt)
    nodes += [Node("fc", "linear", ["pool"], "fc"), Node("out", "output", ["fc"])]
    return Graph(nodes, params)


def identity_graph():
    return Graph([Node("in", "input", []), Node("out", "output", ["in"])])


# -- random verification instances ------------------------------------------


def random_block(rng: Rng, dtype="f64", mode=Mode.EVAL, with_bias=None,
                 max_channels=8, max_hw=16):
    """Random ConvBN block plus matching input and upstream gradient.

    Default shapes stay within 2 x 8 x 16 x 16 with kernels up to 3x3;
    statistics are drawn from well-conditioned ranges so fusion coefficients
    stay away from 0.  Finite-difference checks pass smaller caps.
    """
    dt = dtype_of(dtype)
    n = rng.integers(1, 3)
    c_in = rng.integers(1, max_channels + 1)
    c_out = rng.integers(1, max_channels + 1)
    k = rng.integers(1, 4)
    h = rng.integers(max(k, 5), max_hw + 1)
    w = rng.integers(max(k, 5), max_hw + 1)
    stride = rng.integers(1, 3)
    padding = rng.integers(0, 2)
    if with_bias is None:
        with_bias = rng.next_f64() < 0.5
    weight = rng.normal((c_out, c_in, k, k), 0.0, (c_in * k * k) ** -0.5, dtype=dt)
    bias = rng.normal((c_out,), 0.0, 0.2, dtype=dt) if with_bias else None
    conv = ConvParams(weight, bias, (stride, stride), (padding, padding))
    bn = BNParams(
        gamma=rng.uniform((c_out,), 0.4, 2.2, dtype=dt),
        beta=rng.normal((c_out,), 0.0, 0.5, dtype=dt),
        running_mean=rng.normal((c_out,), 0.0, 0.7, dtype=dt),
        running_var=rng.uniform((c_out,), 0.25, 4.0, dtype=dt),
    )
    block = ConvBNBlock(conv=conv, bn=bn, mode=mode)
    x = rng.normal((n, c_in, h, w), dtype=dt)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    dz = rng.normal((n, c_out, ho, wo), dtype=dt)
    return block, x, dz


# -- synthetic dataset -------------------------------------------------------


def make_blob_dataset(seed, n, channels=3, size=16, classes=4, dtype="f32"):
    """Gaussian-blob classification images.

    Class k places a blob at a fixed angle around the image center with a
    class-specific per-channel amplitude profile, plus additive noise.
    """
    dt = dtype_of(dtype)
    rng = Rng(seed)
    labels = rng.integers(0, classes, (n,))
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    centers = []
    for k in range(classes):
        angle = 2.0 * np.pi * k / classes
        centers.append((size / 2 + size / 4 * np.sin(angle),
                        size / 2 + size / 4 * np.cos(angle)))
    sigma2 = 2.0 * (size / 8.0) ** 2
    images = np.empty((n, channels, size, size), dtype=np.float64)
    noise = rng.normal((n, channels, size, size), 0.0, 0.3)
    for i in range(n):
        k = int(labels[i])
        ci, cj = centers[k]
        blob = np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / sigma2)
        for c in range(channels):
            amp = 1.0 + 0.5 * np.sin(2.0 * np.pi * (k + 1) * (c + 1) / (classes * channels))
            images[i, c] = amp * blob
    images += noise
    return images.astype(dt), labels.astype(np.int64)
