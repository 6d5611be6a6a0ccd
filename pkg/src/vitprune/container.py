"""Binary tensor container.

Layout (little-endian)::

    b"HVTW"  u32 version=1  u32 count
    per tensor:
        u16 name_len, name (UTF-8)
        u8 dtype            0 = float32, 1 = int8 fixed point
        u8 frac_bits        (dtype 1 only)
        u8 ndim, u32 dims[ndim]
        payload             prod(dims) * itemsize bytes
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .fixedpoint import FxFormat, QTensor

MAGIC = b"HVTW"
VERSION = 1
DTYPE_F32 = 0
DTYPE_Q8 = 1


class ContainerError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
        if isinstance(t, QTensor):
            arr = np.asarray(t.data, order="C")
            parts.append(struct.pack("<BB", DTYPE_Q8, t.frac_bits))
        else:
            arr = np.asarray(t, dtype="<f4", order="C")
            parts.append(struct.pack("<B", DTYPE_F32))
        if arr.ndim > 255:
            raise ValueError("too many dimensions")
        if 0 in arr.shape:
            raise ValueError(f"tensor {name!r} has a zero-sized dimension")
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> dict:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise ContainerError("bad magic, expected b'HVTW'", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}", 4)
    (count,) = r.unpack("<I", "tensor count")
    out: dict = {}
    for _ in range(count):
        start = r.pos
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ContainerError("tensor name is not valid UTF-8", start + 2) from None
        if name in out:
            raise ContainerError(f"duplicate tensor name {name!r}", start)
        dpos = r.pos
        (dtype,) = r.unpack("<B", "dtype")
        if dtype not in (DTYPE_F32, DTYPE_Q8):
            raise ContainerError(f"unknown dtype {dtype} for {name!r}", dpos)
        frac = None
        if dtype == DTYPE_Q8:
            fpos = r.pos
            (frac,) = r.unpack("<B", "frac_bits")
            if frac > 7:
                raise ContainerError(f"frac_bits {frac} out of range for {name!r}", fpos)
        (ndim,) = r.unpack("<B", "ndim")
        dims = r.unpack(f"<{ndim}I", "dims")
        if any(d == 0 for d in dims):
            raise ContainerError(f"zero-sized dimension in {name!r}", r.pos - 4 * ndim)
        count_el = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        itemsize = 4 if dtype == DTYPE_F32 else 1
        payload = r.take(count_el * itemsize, f"payload of {name!r}")
        if dtype == DTYPE_F32:
            arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(tuple(dims))
            out[name] = arr
        else:
            arr = np.frombuffer(payload, dtype=np.int8).copy().reshape(tuple(dims))
            out[name] = QTensor(arr, FxFormat(frac))
    if r.pos != len(buf):
        raise ContainerError("trailing bytes after last tensor", r.pos)
    return out


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save(path, tensors: dict) -> None:
    atomic_write(path, encode(tensors))


def load(path) -> dict:
    return decode(Path(path).read_bytes())
