"""Little-endian binary container shared by datasets and checkpoints.

Layout::

    magic        7 bytes
    version      u8
    kind         u8
    n_dims       u32, then n_dims x u32     (fixed-width header fields)
    meta_len     u32, then meta_len bytes   (UTF-8 JSON)
    n_blocks     u32
    per block:   ndim u8, ndim x u32 shape, prod(shape) x f64

Writes go to a temporary file that is renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

VERSION = 1
DATASET_MAGIC = b"CORALDS"
CHECKPOINT_MAGIC = b"CORALCK"


class ContainerError(Exception):
    """Base class for unreadable container files."""


class FormatVersionError(ContainerError):
    """The file is not a container of the expected kind or version."""


class BadMagicError(FormatVersionError):
    """Leading magic bytes do not match."""


class TruncatedError(ContainerError):
    """The file ended before the declared payload."""


class CountMismatchError(ContainerError):
    """Declared counts disagree with the payload."""


@dataclass
class Container:
    kind: int
    dims: list
    blocks: list
    meta: dict = field(default_factory=dict)


def encode(magic: bytes, c: Container) -> bytes:
    if len(magic) != 7:
        raise ValueError("magic must be 7 bytes")
    parts = [magic, struct.pack("<BB", VERSION, c.kind)]
    parts.append(struct.pack(f"<I{len(c.dims)}I", len(c.dims), *[int(d) for d in c.dims]))
    meta = json.dumps(c.meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    parts.append(struct.pack("<I", len(c.blocks)))
    for block in c.blocks:
        arr = np.asarray(block, dtype="<f8")  # ascontiguousarray would turn 0-d into 1-d
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(magic: bytes, buf: bytes) -> Container:
    r = _Reader(buf)
    got = r.take(len(magic)) if len(buf) >= len(magic) else buf
    if got != magic:
        raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")
    version, kind = r.unpack("<BB")
    if version != VERSION:
        raise FormatVersionError(f"unsupported format version {version}")
    (n_dims,) = r.unpack("<I")
    dims = list(r.unpack(f"<{n_dims}I"))
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt metadata: {exc}") from None
    (n_blocks,) = r.unpack("<I")
    blocks = []
    for _ in range(n_blocks):
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        data = r.take(8 * count)
        blocks.append(np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64))
    if r.pos != len(buf):
        raise CountMismatchError(f"{len(buf) - r.pos} trailing bytes after {n_blocks} blocks")
    return Container(kind, dims, blocks, meta)


def atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write(path, magic: bytes, c: Container) -> None:
    atomic_write(path, encode(magic, c))


def read(path, magic: bytes) -> Container:
    with open(path, "rb") as fh:
        return decode(magic, fh.read())
