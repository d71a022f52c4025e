"""CRC-framed little-endian binary file helpers shared by the on-disk formats."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np


class CorruptFileError(ValueError):
    """Raised when a binary artifact fails its magic, size, or CRC check."""


def write_framed(path: str | Path, magic: bytes, payload: bytes) -> None:
    """Write magic + payload + CRC32(magic + payload) as one file."""
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    body = magic + payload
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def read_framed(path: str | Path, magic: bytes) -> bytes:
    """Read a framed file, verify magic and trailing CRC, return the payload."""
    blob = Path(path).read_bytes()
    if len(blob) < len(magic) + 4:
        raise CorruptFileError(f"{path}: file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptFileError(f"{path}: CRC mismatch")
    if body[:4] != magic:
        raise CorruptFileError(
            f"{path}: bad magic {body[:4]!r}, expected {magic!r}"
        )
    return body[4:]


class Reader:
    """Sequential struct/array reader over a payload buffer."""

    def __init__(self, payload: bytes, name: str = "payload"):
        self._buf = payload
        self._pos = 0
        self._name = name

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self._pos + size > len(self._buf):
            raise CorruptFileError(f"{self._name}: truncated header")
        vals = struct.unpack_from(fmt, self._buf, self._pos)
        self._pos += size
        return vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self._pos + size > len(self._buf):
            raise CorruptFileError(f"{self._name}: truncated array data")
        arr = np.frombuffer(self._buf, dtype=dtype, count=count, offset=self._pos)
        self._pos += size
        return arr.copy()

    def expect_end(self) -> None:
        if self._pos != len(self._buf):
            raise CorruptFileError(f"{self._name}: trailing bytes")


def array_bytes(arr: np.ndarray, dtype: str) -> bytes:
    """Row-major little-endian bytes of ``arr`` cast to ``dtype``."""
    return np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
