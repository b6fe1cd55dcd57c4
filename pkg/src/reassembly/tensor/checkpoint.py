"""Flat binary checkpoint container for named arrays.

Layout (all integers little-endian):

    magic   5 bytes  b"EM3RF"
    version u32      currently 1
    count   u32      number of entries
    entry*  count times:
        name_len u32, name utf-8 bytes
        dtype    u8  (0 = float32, 1 = float64)
        rank     u8
        extents  rank * u64
        payload  row-major little-endian values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"EM3RF"
VERSION = 1

_TAG_OF_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_OF_TAG = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    path = Path(path)
    blobs = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr.dtype not in _TAG_OF_DTYPE:
            raise ValueError(f"entry {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        blobs.append(struct.pack("<I", len(raw)))
        blobs.append(raw)
        blobs.append(struct.pack("<BB", _TAG_OF_DTYPE[arr.dtype], arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    path.write_bytes(b"".join(blobs))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise ValueError(f"truncated checkpoint {path} at byte {off}")
        chunk = buf[off : off + n]
        off += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _DTYPE_OF_TAG:
            raise ValueError(f"entry {name!r} has unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        dtype = _DTYPE_OF_TAG[tag]
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(take(n_items * dtype.itemsize), dtype=dtype)
        entries[name] = data.reshape(shape).astype(dtype.newbyteorder("="))
    if off != len(buf):
        raise ValueError(f"{path} has {len(buf) - off} trailing bytes")
    return entries
