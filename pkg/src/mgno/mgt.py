"""MGT1 binary tensor files.

Layout: magic ``b"MGT1"``, u32 little-endian rank, ``rank`` u64 little-endian
dimensions, then the row-major float64 little-endian payload.  One tensor per
file; stacked datasets are stored as rank-4 tensors (N, c, d_y, d_x).
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"MGT1"


def write_mgt(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write ``array`` as an MGT1 file (always stored as float64)."""
    arr = np.ascontiguousarray(array, dtype=np.float64)
    if arr.ndim < 1:
        arr = arr.reshape(1)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f8", copy=False).tobytes())


def read_mgt(path: str | os.PathLike) -> np.ndarray:
    """Read an MGT1 file back into a float64 array."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise ValueError(f"{path}: truncated header")
        (rank,) = struct.unpack("<I", raw)
        if rank == 0 or rank > 16:
            raise ValueError(f"{path}: implausible rank {rank}")
        raw = fh.read(8 * rank)
        if len(raw) != 8 * rank:
            raise ValueError(f"{path}: truncated dims")
        dims = struct.unpack(f"<{rank}Q", raw)
        count = 1
        for d in dims:
            count *= d
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError(f"{path}: truncated payload "
                             f"({len(payload)} bytes, expected {8 * count})")
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
