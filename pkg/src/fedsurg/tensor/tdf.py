"""TDF binary tensor files.

Layout: ``b"TDF1"``, u8 dtype tag (0 = float64), u8 rank, ``rank`` little-endian
u32 dims, then the row-major little-endian payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TDF1"
DTYPE_F64 = 0


class TDFFormatError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.asarray(array, dtype="<f8")
    if arr.ndim > 255:
        raise TDFFormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<BB", DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise TDFFormatError("bad magic")
    dtype, rank = struct.unpack_from("<BB", blob, 4)
    if dtype != DTYPE_F64:
        raise TDFFormatError(f"unsupported dtype tag {dtype}")
    off = 6 + 4 * rank
    if len(blob) < off:
        raise TDFFormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) != off + 8 * count:
        raise TDFFormatError(f"payload size {len(blob) - off} does not match dims {dims}")
    return np.frombuffer(blob, dtype="<f8", offset=off, count=count).reshape(dims).astype(np.float64)


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
