"""Single-file checkpoint format.

Layout (little endian)::

    b"RNFLMCKP" | u32 version | u64 meta_len | meta JSON (utf-8)
    u32 n_blocks | n_blocks x [u16 name_len | name | u8 ndim | ndim x u64 | float64 data]

Blocks hold every array needed to resume bitwise; the JSON carries scalars,
the RNG state and the config.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError

MAGIC = b"RNFLMCKP"
VERSION = 1


def write_checkpoint(path, meta: dict, blocks: dict[str, np.ndarray]) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is C order; ascontiguousarray would promote 0-d
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<Q", raw, 12)
    pos = 20
    meta = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_blocks,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    blocks = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    return meta, blocks
