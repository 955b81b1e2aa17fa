"""Forward and backward kernels for 2D convolution, batch normalization and
the auxiliary layers of the toy network.

Conventions:
  - Convolution is cross-correlation (deep-learning style).  The input
    gradient is the transposed convolution: kernel rotated 180 degrees
    spatially with the two channel axes swapped, applied with stride-s
    insertion.  Out-of-range input positions read as zero.
  - All ops are pure functions; float32 inputs are accumulated in float64
    and rounded once, so results are independent of reduction blocking.
  - Batch variance is biased (divide by N*H*W), matching the normalization
    denominator; running_var stores the same biased quantity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DegenerateBatchError, InputError, ShapeError

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


@dataclass
class ConvParams:
    """Convolution weight [C_out, C_in, k_h, k_w], optional bias [C_out]."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)

    def __post_init__(self):
        self.stride = _pair(self.stride, "stride")
        self.padding = _pair(self.padding, "padding")
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got shape {self.weight.shape}")
        if self.weight.shape[2] < 1 or self.weight.shape[3] < 1:
            raise ShapeError(f"kernel extents must be >= 1, got {self.weight.shape[2:]}")
        if any(s < 1 for s in self.stride):
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ShapeError(f"padding must be non-negative, got {self.padding}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match C_out {self.weight.shape[0]}"
            )

    @property
    def out_channels(self):
        return self.weight.shape[0]


@dataclass
class BNParams:
    """BatchNorm parameters and running statistics, all shaped [C]."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise ShapeError(f"BN parameter '{name}' shape mismatch against gamma {c}")
        if np.any(self.running_var < 0):
            raise InputError("running_var must be elementwise non-negative")
        if not self.eps > 0:
            raise InputError(f"eps must be positive, got {self.eps}")
        if not 0 < self.momentum < 1:
            raise InputError(f"momentum must lie in (0, 1), got {self.momentum}")


@dataclass
class BatchStats:
    """Per-channel batch mean and biased variance from a train forward."""

    mean: np.ndarray
    var: np.ndarray


def _pair(v, name):
    if isinstance(v, int):
        return (v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 2:
        raise ShapeError(f"{name} must be an int or a pair, got {v!r}")
    return v


def _conv_geometry(x, p: ConvParams):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be rank 4 [N, C, H, W], got shape {x.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = p.weight.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels but weight expects {c_in}")
    sh, sw = p.stride
    ph, pw = p.padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1 or h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(
            f"non-positive output extent for input {x.shape}, kernel {(kh, kw)}, "
            f"stride {p.stride}, padding {p.padding}"
        )
    return ho, wo


def _pad_f64(x, ph, pw):
    n, c, h, w = x.shape
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x, dtype=np.float64)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, :, ph : ph + h, pw : pw + w] = x
    return xp


def conv2d_forward(x, p: ConvParams):
    """Y[n,o,i,j] = b[o] + sum_{c,u,v} w[o,c,u,v] * X[n,c, i*sh-ph+u, j*sw-pw+v]."""
    ho, wo = _conv_geometry(x, p)
    xp = _pad_f64(x, *p.padding)
    w64 = np.ascontiguousarray(p.weight, dtype=np.float64)
    bias = np.zeros(p.out_channels) if p.bias is None else np.ascontiguousarray(p.bias, dtype=np.float64)
    y = kernels.conv2d_forward_padded(xp, w64, bias, p.stride[0], p.stride[1], ho, wo)
    return y.astype(x.dtype, copy=False)


def conv2d_backward(x, p: ConvParams, dy):
    """Gradients (dX, dW, db) for the cross-correlation forward.

    dW correlates the padded input with dY; dX is the transposed convolution
    of dY with the weight; db sums dY over batch and space (broadcast adjoint).
    """
    ho, wo = _conv_geometry(x, p)
    if dy.shape != (x.shape[0], p.out_channels, ho, wo):
        raise ShapeError(
            f"upstream gradient shape {dy.shape} does not match conv output "
            f"{(x.shape[0], p.out_channels, ho, wo)}"
        )
    sh, sw = p.stride
    ph, pw = p.padding
    kh, kw = p.weight.shape[2:]
    xp = _pad_f64(x, ph, pw)
    dy64 = np.ascontiguousarray(dy, dtype=np.float64)
    w64 = np.ascontiguousarray(p.weight, dtype=np.float64)
    dw = kernels.conv2d_dw_padded(xp, dy64, kh, kw, sh, sw)
    dxp = kernels.conv2d_dx_padded(dy64, w64, xp.shape[2], xp.shape[3], sh, sw)
    h, w = x.shape[2], x.shape[3]
    dx = dxp[:, :, ph : ph + h, pw : pw + w]
    db = dy64.sum(axis=(0, 2, 3))
    return (
        np.ascontiguousarray(dx).astype(x.dtype, copy=False),
        dw.astype(x.dtype, copy=False),
        db.astype(x.dtype, copy=False),
    )


def _check_bn_input(y, p: BNParams):
    if y.ndim != 4:
        raise ShapeError(f"BN input must be rank 4, got shape {y.shape}")
    if y.shape[1] != p.gamma.shape[0]:
        raise ShapeError(f"input has {y.shape[1]} channels but BN expects {p.gamma.shape[0]}")


def batch_moments(y):
    """Per-channel mean and biased variance over axes (N, H, W)."""
    mean = y.mean(axis=(0, 2, 3), dtype=np.float64)
    var = np.square(y - mean.reshape(1, -1, 1, 1)).mean(axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(y.dtype), var.astype(y.dtype)


def bn_train_forward_full(y, p: BNParams):
    """Train-mode forward that also exposes the normalized activations."""
    _check_bn_input(y, p)
    n, _, h, w = y.shape
    if n * h * w == 0:
        raise DegenerateBatchError("train-mode BN over an empty batch")
    mean, var = batch_moments(y)
    stats = BatchStats(mean=mean, var=var)
    inv = 1.0 / np.sqrt(var + np.asarray(p.eps, dtype=y.dtype))
    xhat = (y - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    z = p.gamma.reshape(1, -1, 1, 1) * xhat + p.beta.reshape(1, -1, 1, 1)
    new_mean = p.running_mean + p.momentum * (mean - p.running_mean)
    new_var = p.running_var + p.momentum * (var - p.running_var)
    return z, xhat, stats, (new_mean, new_var)


def bn_train_forward(y, p: BNParams):
    """Normalize with batch statistics; returns the EMA-updated running stats
    without mutating `p`.  Update: stat <- stat + momentum * (batch - stat)."""
    z, _, stats, updates = bn_train_forward_full(y, p)
    return z, stats, updates


def bn_eval_forward(y, p: BNParams):
    """Z = gamma * (Y - running_mean) * rsqrt(running_var + eps) + beta."""
    _check_bn_input(y, p)
    coef = p.gamma / np.sqrt(p.running_var + np.asarray(p.eps, dtype=y.dtype))
    shift = p.beta - p.running_mean * coef
    return coef.reshape(1, -1, 1, 1) * y + shift.reshape(1, -1, 1, 1)


def bn_eval_backward(dz, y, p: BNParams):
    """Frozen statistics: dY = coef * dZ; dgamma, dbeta reduce over (N, H, W)."""
    _check_bn_input(y, p)
    if dz.shape != y.shape:
        raise ShapeError(f"dZ shape {dz.shape} does not match Y shape {y.shape}")
    inv = 1.0 / np.sqrt(p.running_var + np.asarray(p.eps, dtype=y.dtype))
    coef = p.gamma * inv
    dy = coef.reshape(1, -1, 1, 1) * dz
    centered = (y - p.running_mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    dgamma = (dz * centered).sum(axis=(0, 2, 3), dtype=np.float64).astype(y.dtype)
    dbeta = dz.sum(axis=(0, 2, 3), dtype=np.float64).astype(y.dtype)
    return dy, dgamma, dbeta


def bn_train_backward(dz, y, stats: BatchStats, p: BNParams):
    """Batch statistics treated as functions of Y (standard derivation)."""
    _check_bn_input(y, p)
    n, _, h, w = y.shape
    if n * h * w < 2:
        raise DegenerateBatchError("train-mode BN backward needs at least 2 elements per channel")
    inv = 1.0 / np.sqrt(stats.var + np.asarray(p.eps, dtype=y.dtype))
    xhat = (y - stats.mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    return _bn_train_backward_xhat(dz, xhat, stats, p)


def _bn_train_backward_xhat(dz, xhat, stats: BatchStats, p: BNParams):
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    inv = 1.0 / np.sqrt(stats.var + np.asarray(p.eps, dtype=xhat.dtype))
    dgamma = (dz * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(xhat.dtype)
    dbeta = dz.sum(axis=(0, 2, 3), dtype=np.float64).astype(xhat.dtype)
    coef = (p.gamma * inv).reshape(1, -1, 1, 1)
    dy = coef * (dz - (dbeta / m).reshape(1, -1, 1, 1) - xhat * (dgamma / m).reshape(1, -1, 1, 1))
    return dy, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    if dy.shape != x.shape:
        raise ShapeError(f"relu gradient shape {dy.shape} does not match input {x.shape}")
    return dy * (x > 0)


def global_avg_pool_forward(x):
    """[N, C, H, W] -> [N, C], averaging over the spatial axes."""
    if x.ndim != 4:
        raise ShapeError(f"pool input must be rank 4, got shape {x.shape}")
    return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)


def global_avg_pool_backward(dy, in_shape):
    n, c, h, w = in_shape
    if dy.shape != (n, c):
        raise ShapeError(f"pool gradient shape {dy.shape} does not match [N, C] = {(n, c)}")
    return np.broadcast_to(dy.reshape(n, c, 1, 1) / (h * w), in_shape).astype(dy.dtype).copy()


def linear_forward(x, weight, bias):
    """Y = X @ W.T + b with X [N, D], W [K, D], b [K]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shapes incompatible: input {x.shape}, weight {weight.shape}")
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y


def linear_backward(dy, x, weight):
    if dy.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"linear gradient shape {dy.shape} does not match output")
    dx = dy @ weight
    dw = dy.T @ x
    db = dy.sum(axis=0, dtype=np.float64).astype(x.dtype)
    return dx, dw, db


def softmax_xent(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, dLogits)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be rank 2 [N, K], got shape {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InputError(f"label index out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(picked).mean(dtype=np.float64))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits.astype(logits.dtype)
