"""Binary tensor checkpoint format.

Layout (all little-endian):

    magic   b"SPHD1"
    u32     tensor count
    per tensor:
        u16     name length
        bytes   UTF-8 name
        u8      rank
        u64[r]  dims
        f32[*]  row-major payload

Payloads are float32 on disk; loading promotes to the float64 working
precision.  Tensors are written in sorted-name order so identical state
produces identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SPHD1"


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        enc = name.encode("utf-8")
        blob += struct.pack("<H", len(enc))
        blob += enc
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.astype("<f4").tobytes()
    path.write_bytes(bytes(blob))


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a checkpoint; returns float64 arrays keyed by name."""
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:5]!r}")
    off = 5
    try:
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}Q", raw, off)
            off += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
            off += 4 * n
            out[name] = data.astype(np.float64).reshape(dims)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out
