"""Binary container for named float32 tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"MUAP"
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u16, name UTF-8, ndim u8, dims u32 each, payload f32 LE
    checksum u64     sum of every payload byte, modulo 2**64

Tensor order is preserved, so writing the same mapping twice yields
byte-identical files.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MUAP"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def save_tensors(path, tensors: dict) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(tensors))
    checksum = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", a.ndim)
        for d in a.shape:
            blob += struct.pack("<I", d)
        payload = a.tobytes()
        checksum = (checksum + sum(payload)) % (1 << 64)
        blob += payload
    blob += struct.pack("<Q", checksum)
    with open(path, "wb") as f:
        f.write(bytes(blob))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def read(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def load_tensors(path) -> dict:
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf)
    if r.read(4, "magic") != MAGIC:
        raise BadMagicError(f"bad magic bytes in {path}")
    (version,) = struct.unpack("<I", r.read(4, "version"))
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    (count,) = struct.unpack("<I", r.read(4, "tensor count"))
    out = {}
    checksum = 0
    for i in range(count):
        (name_len,) = struct.unpack("<H", r.read(2, f"name length of tensor {i}"))
        try:
            name = r.read(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"corrupt name for tensor {i}: {e}") from None
        (ndim,) = struct.unpack("<B", r.read(1, f"ndim of tensor '{name}'"))
        dims = struct.unpack(f"<{ndim}I", r.read(4 * ndim, f"dims of tensor '{name}'"))
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = r.read(4 * n, f"tensor '{name}'")
        checksum = (checksum + sum(payload)) % (1 << 64)
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    (want,) = struct.unpack("<Q", r.read(8, "checksum"))
    if want != checksum:
        raise ChecksumError(f"checksum mismatch in {path}: stored {want}, computed {checksum}")
    return out
