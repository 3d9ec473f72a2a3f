"""Binary container shared by model and dataset files.

Layout (all integers little-endian)::

    b"SSMD" | u32 version | 4-byte section tag | u32 header length | header (UTF-8 JSON)
    u32 tensor count
    per tensor: u32 name length | name | u32 ndim | u32 dims... | u64 payload bytes | f64 payload
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"SSMD"
VERSION = 1
MODEL_TAG = b"MODL"
DATASET_TAG = b"DSET"


class ContainerError(ValueError):
    pass


class FormatError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class LengthError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


def encode(tag: bytes, header: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    if len(tag) != 4:
        raise ValueError("section tag must be 4 bytes")
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), tag, struct.pack("<I", len(head)), head,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode()
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        payload = arr.tobytes()
        parts.append(struct.pack("<Q", len(payload)) + payload)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise LengthError(f"truncated file: wanted {n} bytes at offset {self.pos}, "
                              f"only {len(self.buf) - self.pos} remain")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(buf: bytes, expect_tag: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic number {buf[:4]!r}, expected {MAGIC!r}")
    version = struct.unpack("<I", buf[4:8])[0]
    if version != VERSION:
        raise VersionError(f"unsupported container version {version} (this build reads {VERSION})")
    if len(buf) < 16:
        raise LengthError("truncated file")
    body, stored = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) != stored:
        raise ChecksumError(f"CRC32 mismatch: stored {stored:#010x}, computed {zlib.crc32(body):#010x}")
    r = _Reader(body)
    r.take(8)
    tag = r.take(4)
    if tag != expect_tag:
        raise FormatError(f"section tag {tag!r} where {expect_tag!r} was expected")
    header = json.loads(r.take(r.u32()).decode())
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        declared = struct.unpack("<Q", r.take(8))[0]
        expected = 8 * int(np.prod(shape, dtype=np.int64))
        if declared != expected:
            raise LengthError(f"tensor {name!r}: declared payload {declared} bytes, "
                              f"shape {shape} needs {expected}")
        tensors[name] = np.frombuffer(r.take(declared), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise LengthError(f"{len(body) - r.pos} trailing bytes after last tensor")
    return header, tensors


def write_file(path: Union[str, Path], tag: bytes, header: dict,
               tensors: list[tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(encode(tag, header, tensors))


def read_file(path: Union[str, Path], tag: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), tag)
