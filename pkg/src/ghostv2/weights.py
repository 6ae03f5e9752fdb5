"""Binary weight files.

Layout (all integers little-endian)::

    b"GNV2"                     magic, 4 bytes
    u32  format version         (currently 1)
    u32  tensor count
    per tensor:
        u16  name length, then UTF-8 name bytes
        u8   dtype (0 = float32, 1 = float64)
        u8   rank, then rank x u32 dims
        raw row-major values
    u32  CRC32 of every byte after the magic

Loading parses and verifies the whole file before touching the model, so a
failed load leaves the model unchanged.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError,
    MagicError,
    NameMismatchError,
    ShapeMismatchError,
    TruncationError,
    VersionError,
    WeightFileError,
)

MAGIC = b"GNV2"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode(items) -> bytes:
    body = bytearray()
    body += struct.pack("<II", VERSION, len(items))
    for name, arr in items:
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        body += struct.pack("<H", len(raw_name)) + raw_name
        body += struct.pack("<BB", code, arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()
    return MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf = buf
        self.pos = 4
        self.end = end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise TruncationError(f"file ends inside {what} (needed {n} bytes at offset {self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> list[tuple[str, np.ndarray]]:
    if len(buf) < 4:
        raise TruncationError("file shorter than the magic")
    if buf[:4] != MAGIC:
        raise MagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    # the trailing CRC is reserved up front so that reading into it counts as truncation
    r = _Reader(buf, len(buf) - 4)
    (version,) = r.unpack("<I", "header")
    if version != VERSION:
        raise VersionError(f"unsupported format version {version}, expected {VERSION}")
    (count,) = r.unpack("<I", "header")
    items = []
    for i in range(count):
        (nlen,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(nlen, f"tensor {i} name").decode("utf-8")
        code, rank = r.unpack("<BB", f"tensor {name!r} header")
        if code not in _CODE_DTYPES:
            raise WeightFileError(f"tensor {name!r}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I", f"tensor {name!r} dims")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        raw = r.take(nbytes, f"tensor {name!r} data")
        items.append((name, np.frombuffer(raw, dtype=dtype).reshape(dims).copy()))
    if len(buf) < r.pos + 4:
        raise TruncationError("file ends inside the checksum")
    if len(buf) != r.pos + 4:
        raise ChecksumError(f"{len(buf) - r.pos - 4} unexpected trailing bytes")
    (stored,) = struct.unpack("<I", buf[r.pos : r.pos + 4])
    actual = zlib.crc32(buf[4 : r.pos])
    if stored != actual:
        raise ChecksumError(f"CRC32 mismatch: stored {stored:#010x}, computed {actual:#010x}")
    return items


def save_weights(model, path) -> None:
    Path(path).write_bytes(encode(model.state_items()))


def read_weights(path) -> list[tuple[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def load_weights(model, path) -> None:
    items = dict(read_weights(path))
    targets = model.state_items()
    expected = [name for name, _ in targets]
    for name, arr in targets:
        if name not in items:
            raise NameMismatchError(f"tensor {name!r} missing from {path}")
        got = items[name]
        if got.shape != arr.shape or got.dtype != arr.dtype:
            raise ShapeMismatchError(f"tensor {name!r}: file has {got.dtype}{got.shape}, model has {arr.dtype}{arr.shape}")
    extra = sorted(set(items) - set(expected))
    if extra:
        raise NameMismatchError(f"file has tensors the model lacks, first: {extra[0]!r}")
    for name, arr in targets:
        arr[...] = items[name]
