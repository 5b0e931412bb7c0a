"""Binary tensor files: magic "NDTENS01", rank byte, little-endian u64 dims,
then row-major little-endian float32 payload."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NDTENS01"


class TensorFileError(Exception):
    pass


def write_tensor(path: str | Path, values: np.ndarray) -> None:
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim > 255:
        raise TensorFileError("rank exceeds 255")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("B", arr.ndim))
        for dim in arr.shape:
            f.write(struct.pack("<Q", dim))
        f.write(arr.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise TensorFileError(f"missing tensor file: {path}")
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise TensorFileError(f"bad magic in {path}: {magic!r}")
        (rank,) = struct.unpack("B", f.read(1))
        shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise TensorFileError(f"truncated tensor file: {path}")
        values = np.frombuffer(payload, dtype="<f4", count=count)
    return values.reshape(shape).copy()
