"""CFAM checkpoint container.

Layout (all integers little-endian)::

    b"CFAM"  u16 version  u32 config_len  config (UTF-8 JSON)
    repeated until EOF:
        u32 name_len  name (UTF-8)  u32 rank  u32 dims[rank]  f32 values[prod(dims)]
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CFAM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, config, tensors):
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(blob)))
        fh.write(blob)
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a CFAM checkpoint")
    try:
        version, clen = struct.unpack_from("<HI", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 10
        config = json.loads(raw[pos:pos + clen].decode("utf-8"))
        pos += clen
        tensors = {}
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            values = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
            tensors[name] = values.astype(np.float64).reshape(dims)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return config, tensors
