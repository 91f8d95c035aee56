"""Reader and writer for the IDX binary format used by the MNIST distribution.

Layout (big-endian)::

    byte 0-1  zero
    byte 2    data type code (only 0x08, unsigned byte, is supported)
    byte 3    rank
    4*rank    dimension sizes, uint32 each
    ...       row-major payload
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

UBYTE = 0x08


class IdxError(ValueError):
    """Base class for malformed IDX files."""


class BadMagicError(IdxError):
    pass


class UnsupportedTypeError(IdxError):
    pass


class TruncatedError(IdxError):
    pass


def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def load_idx(path) -> np.ndarray:
    """Parse an IDX file into a uint8 array shaped by its header."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedError(f"{path}: {len(raw)} bytes is shorter than the 4-byte magic")
    if raw[0] != 0 or raw[1] != 0:
        raise BadMagicError(f"{path}: first two bytes must be zero, got {raw[0]:#04x} {raw[1]:#04x}")
    if raw[2] != UBYTE:
        raise UnsupportedTypeError(f"{path}: data type code {raw[2]:#04x} is not supported (need 0x08)")
    rank = raw[3]
    header_end = 4 + 4 * rank
    if len(raw) < header_end:
        raise TruncatedError(f"{path}: header declares rank {rank} but the file ends early")
    dims = struct.unpack(f">{rank}I", raw[4:header_end])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(raw) - header_end
    if payload < expected:
        raise TruncatedError(f"{path}: payload has {payload} bytes, header dims {dims} need {expected}")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_end).reshape(dims).copy()


def write_idx(path, array) -> None:
    """Write a uint8 array as an IDX file (gzip-compressed when the name ends in .gz)."""
    arr = np.asarray(array)
    if arr.ndim == 0 or arr.ndim > 255:
        raise ValueError(f"IDX needs rank 1-255, got {arr.ndim}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("IDX unsigned-byte payload must lie in [0, 255]")
    header = bytes([0, 0, UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    body = header + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(body)
