"""Versioned binary checkpoint format.

Layout (little endian)::

    b"ATVD" | version u32 | tensor count u32
    per tensor: name length u16 | UTF-8 name | ndim u8 | dims u32 * ndim | f32 payload
    trailer: global step u64 | RNG state length u32 | RNG state bytes
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ATVD"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def encode(tensors: dict[str, np.ndarray], step: int, rng_state: bytes) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    buf.write(struct.pack("<QI", step, len(rng_state)))
    buf.write(rng_state)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> tuple[dict[str, np.ndarray], int, bytes]:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("bad magic: not an ATVD checkpoint")
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {VERSION}")
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} ndim")
        dims = r.unpack(f"<{ndim}I", f"{name} dims")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * size, f"{name} payload")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    step, rlen = r.unpack("<QI", "trailer")
    rng_state = r.take(rlen, "rng state")
    return tensors, step, rng_state


def write(path, tensors: dict[str, np.ndarray], step: int, rng_state: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, step, rng_state))
    os.replace(tmp, path)


def read(path) -> tuple[dict[str, np.ndarray], int, bytes]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())
