"""GDT1 binary tensor files.

Layout: magic bytes ``GDT1``, u8 dtype code (0 = float32, 1 = float64),
u8 rank (always 4), four little-endian u32 dims, then the raw little-endian
payload. Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GDT1"
_HEADER = struct.Struct("<4sBB4I")

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class GdtError(Exception):
    """Base error for GDT1 files."""


class GdtBadMagic(GdtError):
    pass


class GdtTruncated(GdtError):
    pass


class GdtShapeError(GdtError):
    pass


def write_array(path: str | Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.ndim != 4:
        raise GdtShapeError(f"GDT1 stores rank-4 tensors, got shape {arr.shape}")
    code = _DTYPE_TO_CODE.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise GdtError(f"unsupported dtype {arr.dtype}")
    header = _HEADER.pack(MAGIC, code, 4, *arr.shape)
    payload = arr.astype(_CODE_TO_DTYPE[code], copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def read_array(path: str | Path, expect_shape: tuple[int, ...] | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise GdtTruncated(f"{path}: file shorter than the magic")
    if raw[:4] != MAGIC:
        raise GdtBadMagic(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise GdtTruncated(f"{path}: incomplete header")
    _, code, rank, d0, d1, d2, d3 = _HEADER.unpack_from(raw)
    if rank != 4:
        raise GdtShapeError(f"{path}: rank {rank} != 4")
    dtype = _CODE_TO_DTYPE.get(code)
    if dtype is None:
        raise GdtError(f"{path}: unknown dtype code {code}")
    shape = (d0, d1, d2, d3)
    expected_bytes = dtype.itemsize * d0 * d1 * d2 * d3
    payload = raw[_HEADER.size :]
    if len(payload) < expected_bytes:
        raise GdtTruncated(f"{path}: payload has {len(payload)} bytes, expected {expected_bytes}")
    if len(payload) > expected_bytes:
        raise GdtError(f"{path}: {len(payload) - expected_bytes} trailing bytes")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if expect_shape is not None and shape != tuple(expect_shape):
        raise GdtShapeError(f"{path}: shape {shape} != expected {tuple(expect_shape)}")
    return arr.astype(dtype.newbyteorder("="), copy=True)
