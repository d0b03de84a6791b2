"""Model checkpoint files.

Layout (all integers little-endian)::

    magic        4 bytes   b"D2KE" (encoder) or b"D2KB" (recommender)
    version      u32       1
    schema hash  32 bytes  SHA-256 of the schema's canonical text
    meta length  u32, then that many bytes of UTF-8 JSON (hyperparameters)
    param count  u32
    per parameter, in ascending name order:
        name length u16, name (UTF-8), ndim u32, ndim x u32 dims,
        prod(dims) x float64
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import autograd as ag
from .errors import FormatError

VERSION = 1


def save_checkpoint(path, magic: bytes, schema, hyper: dict, params: dict[str, ag.Tensor]) -> None:
    meta = json.dumps(hyper, sort_keys=True).encode("utf-8")
    chunks = [magic, struct.pack("<I", VERSION), schema.hash(), struct.pack("<I", len(meta)), meta,
              struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", arr.ndim)
                      + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, magic: bytes) -> tuple[dict, dict[str, ag.Tensor]]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("checkpoint truncated", pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != magic:
        raise FormatError(f"bad magic, expected {magic!r}", 0)
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    schema_hash = take(32)
    (mlen,) = struct.unpack("<I", take(4))
    hyper = json.loads(take(mlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = ag.parameter(data, name)
    if pos != len(buf):
        raise FormatError("trailing bytes after last parameter", pos)
    from .data import FeatureSchema
    if "schema" in hyper and FeatureSchema.from_text(hyper["schema"]).hash() != schema_hash:
        raise FormatError("schema hash does not match embedded schema", 8)
    return hyper, params
