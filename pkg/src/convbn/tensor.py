"""Dense tensor primitives: broadcasting, its adjoint, elementwise arithmetic,
and a reproducible PRNG.

Tensors are plain numpy arrays restricted to float32/float64, C-contiguous
row-major layout, rank <= 8.  All operations here are pure: inputs are never
mutated and results are freshly allocated.

Reductions on float32 inputs accumulate in float64 and round once at the end,
so results are independent of how numpy blocks the summation.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

MAX_RANK = 8

DTYPES = {
    "f32": np.dtype(np.float32),
    "f64": np.dtype(np.float64),
}
DTYPE_NAMES = {v: k for k, v in DTYPES.items()}

Shape = tuple


def dtype_of(name):
    """Map 'f32'/'f64' to the numpy dtype, validating the name."""
    try:
        return DTYPES[name]
    except KeyError:
        raise ValueError(f"unsupported dtype {name!r}; expected 'f32' or 'f64'") from None


def check_shape(shape):
    shape = tuple(int(e) for e in shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds maximum rank {MAX_RANK}")
    if any(e < 0 for e in shape):
        raise ShapeError(f"negative extent in shape {shape}")
    return shape


def _contig(arr):
    # np.ascontiguousarray promotes rank-0 to rank-1; keep scalars intact
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


def as_tensor(data, dtype=None):
    """Coerce to a validated C-contiguous f32/f64 array."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in DTYPE_NAMES:
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        else:
            raise ValueError(f"unsupported dtype {arr.dtype}; only float32/float64 tensors")
    check_shape(arr.shape)
    return _contig(arr)


def _broadcast_compatible(src, target):
    """Right-aligned compatibility: each src extent equals target's or is 1."""
    if len(src) > len(target):
        return False
    for s, t in zip(reversed(src), reversed(target)):
        if s != t and s != 1:
            return False
    return True


def broadcast_to(t, target):
    """Replicate `t` to shape `target` (right-aligned, size-1 stretching)."""
    t = as_tensor(t)
    target = check_shape(target)
    if not _broadcast_compatible(t.shape, target):
        raise ShapeError(f"cannot broadcast shape {tuple(t.shape)} to {target}")
    return _contig(np.broadcast_to(t, target).copy())


def reduce_to(t, target):
    """Adjoint of broadcast_to: sum over every axis that replication created.

    For all u, v:  dot(broadcast_to(v, shape(u)), u) == dot(v, reduce_to(u, shape(v))).
    """
    t = as_tensor(t)
    target = check_shape(target)
    if not _broadcast_compatible(target, t.shape):
        raise ShapeError(f"cannot reduce shape {tuple(t.shape)} to {target}")
    out_dtype = t.dtype
    lead = t.ndim - len(target)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, e in enumerate(target) if e == 1 and t.shape[lead + i] != 1
    )
    if axes:
        t = t.sum(axis=axes, keepdims=False, dtype=np.float64)
        t = t.reshape(target)
    return _contig(t.astype(out_dtype, copy=False))


_BINARY = {"add", "sub", "mul", "div"}
_UNARY = {"rsqrt"}


def elementwise(op, a, b=None):
    """Elementwise arithmetic with implicit broadcasting.

    div rejects division by exact zero and rsqrt rejects x <= 0; the engine
    never relies on inf/nan propagation.
    """
    a = as_tensor(a)
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary")
        if np.any(a <= 0):
            raise DomainError(f"rsqrt requires strictly positive input, got min {a.min()!r}")
        return _contig(1.0 / np.sqrt(a))
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise ValueError(f"{op} is binary")
    b = as_tensor(b, dtype=a.dtype)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None
    check_shape(out_shape)
    if op == "add":
        return _contig(a + b)
    if op == "sub":
        return _contig(a - b)
    if op == "mul":
        return _contig(a * b)
    if np.any(b == 0):
        raise DomainError("division by exact zero")
    return _contig(a / b)


def rsqrt(a):
    return elementwise("rsqrt", a)


_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = float(2.0 ** -53)


class Rng:
    """SplitMix64 generator.

    State update: ``state += 0x9E3779B97F4A7C15`` (mod 2^64).  Output mix of
    the updated state z: ``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
    z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31``.
    Doubles are ``(z >> 11) * 2**-53`` in [0, 1).  The i-th output depends
    only on ``seed + (i + 1) * gamma``, so blocks of the stream are produced
    vectorized; scalar and bulk draws yield the identical sequence.

    Single-owner: concurrent use requires independently seeded instances.
    """

    def __init__(self, seed):
        self._state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    @staticmethod
    def _mix(z):
        z = (z ^ (z >> np.uint64(30))) * _SM_MIX1
        z = (z ^ (z >> np.uint64(27))) * _SM_MIX2
        return z ^ (z >> np.uint64(31))

    def next_u64(self):
        # scalar path in plain ints: same arithmetic mod 2**64, no numpy
        # overflow warnings
        mask = (1 << 64) - 1
        s = (int(self._state) + int(_SM_GAMMA)) & mask
        self._state = np.uint64(s)
        z = s
        z = ((z ^ (z >> 30)) * int(_SM_MIX1)) & mask
        z = ((z ^ (z >> 27)) * int(_SM_MIX2)) & mask
        return z ^ (z >> 31)

    def next_f64(self):
        return (self.next_u64() >> 11) * _INV_2_53

    def _raw_block(self, n):
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * _SM_GAMMA
            z = self._mix(self._state + steps)
        self._state = np.uint64((int(self._state) + n * int(_SM_GAMMA)) & ((1 << 64) - 1))
        return z

    def uniform(self, shape=(), lo=0.0, hi=1.0, dtype=np.float64):
        """Uniform draw over [lo, hi), row-major fill order."""
        shape = check_shape(shape if isinstance(shape, (tuple, list)) else (shape,))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self._raw_block(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        out = lo + u * (hi - lo)
        return out.reshape(shape).astype(dtype) if shape else dtype(out[0])

    def normal(self, shape=(), mean=0.0, std=1.0, dtype=np.float64):
        """Box-Muller on consecutive uniform pairs; u1 is shifted into (0, 1]."""
        shape = check_shape(shape if isinstance(shape, (tuple, list)) else (shape,))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        m = n + (n & 1)
        z = self._raw_block(m) >> np.uint64(11)
        u1 = (z[0::2].astype(np.float64) + 1.0) * _INV_2_53
        u2 = z[1::2].astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        pair = np.empty(m, dtype=np.float64)
        pair[0::2] = r * np.cos(2.0 * np.pi * u2)
        pair[1::2] = r * np.sin(2.0 * np.pi * u2)
        out = mean + std * pair[:n]
        return out.reshape(shape).astype(dtype) if shape else dtype(out[0])

    def integers(self, lo, hi, shape=()):
        """Integers in [lo, hi) by scaling the double stream (hi - lo < 2^53)."""
        shape = check_shape(shape if isinstance(shape, (tuple, list)) else (shape,))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self._raw_block(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        out = lo + np.floor(u * (hi - lo)).astype(np.int64)
        return out.reshape(shape) if shape else int(out[0])

    def shuffle_index(self, n):
        """Deterministic Fisher-Yates permutation of range(n)."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return np.asarray(idx, dtype=np.int64)
