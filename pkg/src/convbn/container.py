"""CBNT binary container for named tensors.

Layout, all integers little-endian:

    magic   4 bytes  b"CBNT"
    version u32      1
    count   u32      number of tensors
    then per tensor:
        name_len u32
        name     name_len bytes, UTF-8
        dtype    u8   (0 = f32, 1 = f64)
        rank     u32
        extents  rank * u32
        payload  raw row-major scalars, little-endian

Round trips are bit-exact.  Files written by this module list tensors in
sorted name order so equal maps produce equal bytes; the reader accepts any
order.
"""

from __future__ import annotations

import struct
from io import BytesIO

import numpy as np

from .errors import FormatError
from .tensor import MAX_RANK, as_tensor

MAGIC = b"CBNT"
VERSION = 1

_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensors(tensors, path):
    """Write a name -> tensor map. Names must be unique non-empty strings."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names")
    buf = BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(names)))
    for name in sorted(names):
        arr = as_tensor(tensors[name])
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BI", _DTYPE_CODE[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    data = buf.getvalue()
    if hasattr(path, "write"):
        path.write(data)
    else:
        with open(path, "wb") as fh:
            fh.write(data)
    return len(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", offset=self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]


def read_tensors(path):
    """Read a CBNT file back into a name -> tensor dict."""
    if hasattr(path, "read"):
        data = path.read()
    else:
        with open(path, "rb") as fh:
            data = fh.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    count = r.u32("count")
    out = {}
    for _ in range(count):
        name_len = r.u32("name length")
        name_off = r.pos
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", offset=name_off) from None
        code_off = r.pos
        code = r.u8("dtype code")
        if code not in _CODE_DTYPE:
            raise FormatError(f"unknown dtype code {code}", offset=code_off)
        rank_off = r.pos
        rank = r.u32("rank")
        if rank > MAX_RANK:
            raise FormatError(f"rank {rank} exceeds maximum {MAX_RANK}", offset=rank_off)
        extents = struct.unpack(f"<{rank}I", r.take(4 * rank, "extents"))
        dtype = _CODE_DTYPE[code]
        numel = 1
        for e in extents:
            numel *= e
        payload = r.take(numel * dtype.itemsize, f"payload of '{name}'")
        if name in out:
            raise FormatError(f"duplicate tensor name '{name}'", offset=name_off)
        # copy out of the frombuffer view: tensors are owned, writable values
        arr = np.frombuffer(payload, dtype=dtype).reshape(extents)
        out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last tensor", offset=r.pos)
    return out
