"""The ``CMTW`` binary tensor container.

Layout (all integers little-endian)::

    b"CMTW" | version u32 | [spec length u32 | spec JSON]  (model files only)
    tensor count u32
    per tensor: name length u32 | UTF-8 name | dtype u8 | rank u8 | extents u64... | raw data

dtype code 0 is float32, 1 is float64.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import MagicError, SerializationError, TruncatedError, VersionError

MAGIC = b"CMTW"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _encode_tensors(tensors) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise SerializationError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return b"".join(parts)


def encode(tensors, spec: dict | None = None) -> bytes:
    head = MAGIC + struct.pack("<I", VERSION)
    if spec is not None:
        blob = json.dumps(spec, sort_keys=True).encode("utf-8")
        head += struct.pack("<I", len(blob)) + blob
    return head + _encode_tensors(tensors)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(
                f"{self.source}: truncated while reading {what} "
                f"(needed {n} bytes at offset {self.pos}, file has {len(self.data)})"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes, *, with_spec: bool, source: str = "<bytes>"):
    """Parse container bytes; returns ``(spec_or_None, {name: array})``."""
    rd = _Reader(data, source)
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise MagicError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = rd.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"{source}: unsupported format version {version} (this build reads {VERSION})")
    spec = None
    if with_spec:
        (n,) = rd.unpack("<I", "spec length")
        try:
            spec = json.loads(rd.take(n, "spec record").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SerializationError(f"{source}: spec record is not valid JSON: {exc}") from exc
    (count,) = rd.unpack("<I", "tensor count")
    tensors = {}
    for idx in range(count):
        (nlen,) = rd.unpack("<I", f"name length of tensor {idx}")
        try:
            name = rd.take(nlen, f"name of tensor {idx}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SerializationError(f"{source}: tensor {idx} name is not UTF-8") from exc
        code, rank = rd.unpack("<BB", f"header of {name!r}")
        if code not in _DTYPES:
            raise SerializationError(f"{source}: tensor {name!r} has unknown dtype code {code}")
        shape = rd.unpack(f"<{rank}Q", f"extents of {name!r}")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = rd.take(nbytes, f"data of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if rd.pos != len(data):
        raise SerializationError(f"{source}: {len(data) - rd.pos} trailing bytes after tensor table")
    return spec, tensors


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=".cmtw")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def save_tensors(path, tensors) -> None:
    atomic_write(path, encode(tensors))


def load_tensors(path) -> dict:
    return decode(_read(path), with_spec=False, source=os.fspath(path))[1]


def save_record(path, spec: dict, tensors) -> None:
    atomic_write(path, encode(tensors, spec))


def load_record(path):
    return decode(_read(path), with_spec=True, source=os.fspath(path))
