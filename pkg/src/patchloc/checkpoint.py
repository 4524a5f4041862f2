"""Binary checkpoint files for named tensors.

Layout: magic "PLCK", u32 version, u32 tensor count; per tensor a u16 name
length, the UTF-8 name, u8 rank, u32 extents, then the little-endian f64
payload. Entries are written in sorted name order so identical contents
always produce identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = b"PLCK"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    items = sorted(tensors.items())
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(items))
    for name, arr in items:
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor rank {arr.ndim} exceeds format limit")
        blob += struct.pack("<H", len(raw))
        blob += raw
        blob += struct.pack("<B", arr.ndim)
        for ext in arr.shape:
            blob += struct.pack("<I", ext)
        blob += arr.astype("<f8").tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}: {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from("<" + "I" * rank, blob, off)
        off += 4 * rank
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        out[name] = arr.astype(np.float64).copy()
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes in {path}")
    return out
