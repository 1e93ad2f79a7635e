"""Binary checkpoint container.

Layout (little-endian)::

    b"SPLN" | u32 version | u32 header_len | header (canonical JSON, UTF-8)
    | u32 n_records | records...

    record = u32 name_len | name (UTF-8) | u32 rank | u64 dims[rank] | f32 payload

The JSON header carries the architecture descriptor plus optional provenance.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SPLN"
VERSION = 1


class FormatError(ValueError):
    """File is truncated, corrupt or of an unsupported version."""


class ArchitectureError(FormatError):
    """Checkpoint architecture does not match the receiving model."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_checkpoint(path, header: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    hbytes = canonical_json(dict(header)).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError("bad magic: not a checkpoint file")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt checkpoint header: {e}") from None
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last record")
    return header, arrays
