"""ConvBN block with four operating modes.

Mode summary (Z is the block output, J the downstream loss):

  Train   conv, then normalize with batch statistics; running statistics
          receive an EMA update that is returned to the caller.
  Eval    conv, then normalize with frozen running statistics.
  Tune    the affine fold of BN into the conv weights is recomputed from the
          live parameters on every forward; gradient-equivalent to Eval.
  Deploy  conv with once-fused constant parameters; BN is gone and gradients
          flow to the fused weights directly.

Saved-for-backward sets per mode: Eval {X, Y}; Tune {X, w_fused, b_fused};
Deploy {X}; Train {X, xhat, mean, var}.  Nothing else survives a forward.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ModeError, ShapeError
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
)


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"
    TUNE = "tune"
    DEPLOY = "deploy"

    @classmethod
    def parse(cls, name):
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown mode {name!r}") from None


def fuse_params(weight, bias, gamma, beta, running_mean, running_var, eps):
    """Fold BN into conv parameters.

    w' = (gamma * rsqrt(var + eps)) * w, applied per output channel;
    b' = (b - mean) * (gamma * rsqrt(var + eps)) + beta.  Absent bias is a
    zero vector.
    """
    c_out = weight.shape[0]
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c_out,):
            raise ShapeError(f"{name} shape {t.shape} does not match C_out {c_out}")
    inv = 1.0 / np.sqrt(running_var + np.asarray(eps, dtype=weight.dtype))
    coef = gamma * inv
    w_fused = weight * coef.reshape(-1, 1, 1, 1)
    b0 = np.zeros(c_out, dtype=weight.dtype) if bias is None else bias
    b_fused = (b0 - running_mean) * coef + beta
    return w_fused, b_fused


@dataclass
class SavedForBackward:
    """Tensors a forward pass retains for its matching backward."""

    mode: Mode
    tensors: dict

    def names(self):
        return list(self.tensors)

    def element_counts(self):
        return {name: int(t.size) for name, t in self.tensors.items()}


@dataclass
class ConvBNBlock:
    """A conv layer plus its BN layer, tagged with an operating mode.

    Tune mode carries the derived buffers weight_coeff = rsqrt(var + eps)
    (shaped [C_out, 1, 1, 1]) and bias_delta = -running_mean; both are
    functions of the frozen statistics.  Deploy blocks have no live BN
    parameters but keep a snapshot of the pre-fusion state for revert.
    """

    conv: ConvParams
    bn: BNParams | None
    mode: Mode = Mode.EVAL
    weight_coeff: np.ndarray | None = None
    bias_delta: np.ndarray | None = None
    snapshot: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode is not Mode.DEPLOY and self.bn is None:
            raise ModeError(f"{self.mode.value} mode requires BN parameters")
        if self.mode is Mode.TUNE and self.weight_coeff is None:
            self.refresh_buffers()

    def refresh_buffers(self):
        self.weight_coeff = (1.0 / np.sqrt(
            self.bn.running_var + np.asarray(self.bn.eps, dtype=self.bn.running_var.dtype)
        )).reshape(-1, 1, 1, 1)
        self.bias_delta = -self.bn.running_mean

    def forward(self, x, mode=None):
        return forward(self, x, mode=mode)

    def backward(self, saved, dz):
        return backward(self, saved, dz)


def make_block(conv: ConvParams, bn: BNParams, mode=Mode.EVAL):
    return ConvBNBlock(conv=conv, bn=bn, mode=Mode.parse(mode) if not isinstance(mode, Mode) else mode)


def to_deploy(block: ConvBNBlock):
    """Fuse once-for-all; detaches (gamma, beta) and snapshots raw params."""
    if block.mode is Mode.DEPLOY:
        raise ModeError("block is already in Deploy mode")
    bn = block.bn
    w_fused, b_fused = fuse_params(
        block.conv.weight, block.conv.bias, bn.gamma, bn.beta,
        bn.running_mean, bn.running_var, bn.eps,
    )
    snapshot = {
        "weight": block.conv.weight.copy(),
        "bias": None if block.conv.bias is None else block.conv.bias.copy(),
        "bn": bn,
        "mode": block.mode,
    }
    return ConvBNBlock(
        conv=ConvParams(w_fused, b_fused, block.conv.stride, block.conv.padding),
        bn=None,
        mode=Mode.DEPLOY,
        snapshot=snapshot,
    )


def revert(block: ConvBNBlock):
    """Undo to_deploy bitwise; a non-deployed block is returned unchanged."""
    if block.mode is not Mode.DEPLOY:
        return block
    if block.snapshot is None:
        raise ModeError("Deploy block has no snapshot to revert from")
    snap = block.snapshot
    return ConvBNBlock(
        conv=ConvParams(snap["weight"], snap["bias"], block.conv.stride, block.conv.padding),
        bn=snap["bn"],
        mode=snap.get("mode", Mode.EVAL),
    )


def scaling_coefficients(block: ConvBNBlock):
    """c[o] = gamma[o] * rsqrt(running_var[o] + eps), the weight scaling of
    fusion and the inverse scaling of the Deploy-mode weight gradient."""
    if block.bn is None:
        raise ModeError("Deploy block has no scaling coefficients (consumed at fusion)")
    bn = block.bn
    return bn.gamma / np.sqrt(bn.running_var + np.asarray(bn.eps, dtype=bn.gamma.dtype))


def forward(block: ConvBNBlock, x, mode=None):
    """Run the block; returns (Z, SavedForBackward, running_stat_updates).

    The third element is None except in Train mode, where it carries the
    EMA-updated (running_mean, running_var) pair; the block itself is never
    mutated.
    """
    mode = block.mode if mode is None else mode
    if block.bn is None and mode is not Mode.DEPLOY:
        raise ModeError(f"cannot run {mode.value} forward on a Deploy block")
    if mode is Mode.DEPLOY and block.bn is not None:
        raise ModeError("Deploy forward requires a fused block (use to_deploy)")

    if mode is Mode.DEPLOY:
        z = conv2d_forward(x, block.conv)
        return z, SavedForBackward(Mode.DEPLOY, {"X": x}), None

    bn = block.bn
    if mode is Mode.EVAL:
        y = conv2d_forward(x, block.conv)
        z = bn_eval_forward(y, bn)
        return z, SavedForBackward(Mode.EVAL, {"X": x, "Y": y}), None

    if mode is Mode.TUNE:
        w_fused, b_fused = fuse_params(
            block.conv.weight, block.conv.bias, bn.gamma, bn.beta,
            bn.running_mean, bn.running_var, bn.eps,
        )
        z = conv2d_forward(x, ConvParams(w_fused, b_fused, block.conv.stride, block.conv.padding))
        saved = SavedForBackward(Mode.TUNE, {"X": x, "w_fused": w_fused, "b_fused": b_fused})
        return z, saved, None

    # Train
    y = conv2d_forward(x, block.conv)
    z, xhat, stats, updates = bn_train_forward_full(y, bn)
    saved = SavedForBackward(
        Mode.TRAIN, {"X": x, "xhat": xhat, "mean": stats.mean, "var": stats.var}
    )
    return z, saved, updates


def backward(block: ConvBNBlock, saved: SavedForBackward, dz):
    """Mode-specific gradients per the block's backward equations.

    Eval/Tune/Train return {x, weight, bias, gamma, beta}; Deploy returns
    {x, weight, bias} for the fused parameters.  `bias` is reported even for
    bias-free convs (gradient of the implicit zero bias).
    """
    if saved.mode is not block.mode:
        raise ModeError(
            f"saved tensors from a {saved.mode.value} forward cannot drive a "
            f"{block.mode.value} backward"
        )
    x = saved.tensors["X"]

    if saved.mode is Mode.DEPLOY:
        dx, dw, db = conv2d_backward(x, block.conv, dz)
        return {"x": dx, "weight": dw, "bias": db}

    bn = block.bn
    if saved.mode is Mode.EVAL:
        dy, dgamma, dbeta = bn_eval_backward(dz, saved.tensors["Y"], bn)
        dx, dw, db = conv2d_backward(x, block.conv, dy)
        return {"x": dx, "weight": dw, "bias": db, "gamma": dgamma, "beta": dbeta}

    if saved.mode is Mode.TUNE:
        fused = ConvParams(saved.tensors["w_fused"], saved.tensors["b_fused"],
                           block.conv.stride, block.conv.padding)
        dx, dw_fused, db_fused = conv2d_backward(x, fused, dz)
        inv = 1.0 / np.sqrt(bn.running_var + np.asarray(bn.eps, dtype=x.dtype))
        coef = bn.gamma * inv
        dw = dw_fused * coef.reshape(-1, 1, 1, 1)
        db = db_fused * coef
        b0 = np.zeros_like(bn.beta) if block.conv.bias is None else block.conv.bias
        dgamma = (
            (dw_fused * block.conv.weight).sum(axis=(1, 2, 3), dtype=np.float64).astype(x.dtype)
            * inv
            + db_fused * (b0 - bn.running_mean) * inv
        )
        return {"x": dx, "weight": dw, "bias": db, "gamma": dgamma, "beta": db_fused}

    # Train
    stats = BatchStats(mean=saved.tensors["mean"], var=saved.tensors["var"])
    dy, dgamma, dbeta = _bn_train_backward_xhat(dz, saved.tensors["xhat"], stats, bn)
    dx, dw, db = conv2d_backward(x, block.conv, dy)
    return {"x": dx, "weight": dw, "bias": db, "gamma": dgamma, "beta": dbeta}


RESERVED_NAMES = ("conv.weight", "conv.bias", "bn.gamma", "bn.beta",
                  "bn.running_mean", "bn.running_var")


def block_to_tensors(block: ConvBNBlock):
    """Parameter map using the reserved CBNT names."""
    out = {"conv.weight": block.conv.weight}
    if block.conv.bias is not None:
        out["conv.bias"] = block.conv.bias
    if block.bn is not None:
        out["bn.gamma"] = block.bn.gamma
        out["bn.beta"] = block.bn.beta
        out["bn.running_mean"] = block.bn.running_mean
        out["bn.running_var"] = block.bn.running_var
    return out


def block_from_tensors(tensors, stride=(1, 1), padding=(0, 0), eps=1e-5,
                       momentum=0.1, mode=Mode.EVAL):
    conv = ConvParams(tensors["conv.weight"], tensors.get("conv.bias"), stride, padding)
    bn = None
    if "bn.gamma" in tensors:
        bn = BNParams(tensors["bn.gamma"], tensors["bn.beta"],
                      tensors["bn.running_mean"], tensors["bn.running_var"],
                      eps=eps, momentum=momentum)
    return ConvBNBlock(conv=conv, bn=bn, mode=mode)
