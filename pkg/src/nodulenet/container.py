"""Tensor-directory container shared by checkpoints and baseline models.

Layout (little-endian)::

    magic        4 bytes  ("TPLN", "TPSV" or "TPKM")
    version      u32
    n_scales     u32, then n_scales x f64
    meta_len     u32, then meta_len bytes of UTF-8 JSON
    n_tensors    u32
    directory    per tensor: name_len u16, name, ndim u8, ndim x u32 dims, offset u64
    payload      float32 values, offsets relative to payload start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1


class ContainerError(ValueError):
    """Base class for unreadable container files."""


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


def write_container(path, magic: bytes, tensors: dict, scales=(), meta=None, version=VERSION) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    head = [magic, struct.pack("<I", version), struct.pack("<I", len(scales))]
    head += [struct.pack("<d", float(s)) for s in scales]
    head += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    payload = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        head.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        head.append(struct.pack("<Q", offset))
        payload.append(arr.tobytes())
        offset += arr.nbytes
    Path(path).write_bytes(b"".join(head) + b"".join(payload))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path, magic: bytes, version=VERSION):
    """Return ``(tensors, scales, meta)``; raises a :class:`ContainerError` subclass."""
    r = _Reader(Path(path).read_bytes())
    got = r.take(4)
    if got != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {got!r}")
    (ver,) = r.unpack("<I")
    if ver != version:
        raise VersionMismatchError(f"container version {ver}, this reader supports {version}")
    (n_scales,) = r.unpack("<I")
    scales = list(r.unpack(f"<{n_scales}d")) if n_scales else []
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt metadata block: {exc}") from None
    (n_tensors,) = r.unpack("<I")
    directory = []
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (offset,) = r.unpack("<Q")
        directory.append((name, shape, offset))
    base = r.pos
    tensors = {}
    for name, shape, offset in directory:
        count = int(np.prod(shape, dtype=np.int64))
        start = base + offset
        end = start + 4 * count
        if end > len(r.data):
            raise TruncatedFileError(f"tensor {name!r} runs past end of file")
        tensors[name] = np.frombuffer(r.data, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)
    return tensors, scales, meta
