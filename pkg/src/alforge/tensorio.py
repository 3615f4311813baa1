"""Binary tensor container: `ALF0TENS` magic, dtype code, rank, dims, payload.

Layout (all integers little-endian):
  bytes 0-7   magic  b"ALF0TENS"
  byte  8     element type: 0x01 = float64, 0x02 = int32
  byte  9     rank
  then  rank x 8-byte dimensions
  then  row-major payload

The format is bit-exact across platforms; readers fail loudly with the
byte offset of the first inconsistency.
"""

from __future__ import annotations

import io

import numpy as np

MAGIC = b"ALF0TENS"
_CODE_F64 = 0x01
_CODE_I32 = 0x02
_DTYPES = {_CODE_F64: np.dtype("<f8"), _CODE_I32: np.dtype("<i4")}
_CODES = {np.dtype("<f8"): _CODE_F64, np.dtype("<i4"): _CODE_I32}

MAX_DIM = 2**48  # sanity cap; anything larger is a corrupt header


class FormatError(ValueError):
    """Malformed tensor container; `offset` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float64:
        arr = arr.astype("<f8", copy=False)
    elif arr.dtype == np.int32:
        arr = arr.astype("<i4", copy=False)
    else:
        raise ValueError(f"unsupported dtype {arr.dtype}; use float64 or int32")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(bytes([_CODES[arr.dtype], arr.ndim]))
    for d in arr.shape:
        out.write(int(d).to_bytes(8, "little"))
    out.write(arr.tobytes(order="C"))
    return out.getvalue()


def tensor_from_bytes(buf: bytes, base_offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor record; returns (array, bytes consumed)."""

    def need(n, at, what):
        if len(buf) < at + n:
            raise FormatError(f"truncated container: missing {what}", base_offset + len(buf))

    need(len(MAGIC), 0, "magic")
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic bytes", base_offset)
    need(2, len(MAGIC), "type/rank header")
    code = buf[8]
    if code not in _DTYPES:
        raise FormatError(f"unknown element-type code 0x{code:02x}", base_offset + 8)
    rank = buf[9]
    pos = 10
    dims = []
    for i in range(rank):
        need(8, pos, f"dimension {i}")
        d = int.from_bytes(buf[pos : pos + 8], "little")
        if d > MAX_DIM:  # zero is legal: empty datasets roundtrip
            raise FormatError(f"dimension {i} out of range: {d}", base_offset + pos)
        dims.append(d)
        pos += 8
    dtype = _DTYPES[code]
    count = 1
    for d in dims:
        count *= d
        if count > MAX_DIM:
            raise FormatError("dimension product overflow", base_offset + 9)
    nbytes = count * dtype.itemsize
    need(nbytes, pos, "payload")
    arr = np.frombuffer(buf[pos : pos + nbytes], dtype=dtype).reshape(dims).copy()
    return arr, pos + nbytes


def write_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    arr, used = tensor_from_bytes(buf)
    if used != len(buf):
        raise FormatError("trailing bytes after tensor payload", used)
    return arr
