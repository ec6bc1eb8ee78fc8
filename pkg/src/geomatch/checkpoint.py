"""Binary model checkpoint container.

Layout (all integers little-endian)::

    b"GEOM"                      magic
    u32  version                 currently 1
    u32  meta_len, meta bytes    UTF-8 JSON: model config + resolved run config
    u32  n_entries
    n_entries x:
        u16 name_len, name bytes (UTF-8)
        u8  ndim, ndim x u32 dims
        u64 byte offset into the data section
    data section                 little-endian float32 arrays, back to back
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .matchnet import ModelConfig, ModelParams

MAGIC = b"GEOM"
VERSION = 1


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["model_config"] = params.config.to_dict()
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    table = bytearray()
    data = bytearray()
    for name in sorted(params.arrays):
        arr = np.ascontiguousarray(params.arrays[name], dtype="<f4")
        enc = name.encode("utf-8")
        table += struct.pack("<H", len(enc)) + enc
        table += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", len(data))
        data += arr.tobytes()
    blob = MAGIC + struct.pack("<I", VERSION) + struct.pack("<I", len(meta_bytes)) + meta_bytes
    blob += struct.pack("<I", len(params.arrays)) + bytes(table) + bytes(data)
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise InvalidInputError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise InvalidInputError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    (meta_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    entries = []
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        entries.append((name, shape, offset))
    arrays = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape, dtype=np.int64))
        start = pos + offset
        if start + 4 * count > len(buf):
            raise InvalidInputError(f"{path}: truncated data for entry {name!r}")
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float64)
    config = ModelConfig.from_dict(meta.pop("model_config"))
    return ModelParams(config, arrays), meta
