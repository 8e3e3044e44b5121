"""Dense tensors and the ``.sals`` binary container.

Layout (little-endian)::

    b"SALS"  version:u8=1  dtype:u8=0 (f32)  ndim:u8  reserved:u8=0
    ndim x u64 dims
    row-major f32 payload
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"SALS"
VERSION = 1
DTYPE_F32 = 0
_HEAD = struct.Struct("<4sBBBB")


class TensorFormatError(ValueError):
    """Malformed tensor file."""


class BadMagicError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError):
    pass


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a float32 row-major matrix, checking shape and finiteness."""
    m = np.ascontiguousarray(data, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected {cols} columns, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("matrix contains NaN or Inf")
    return m


def encode_tensor(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    head = _HEAD.pack(MAGIC, VERSION, DTYPE_F32, a.ndim, 0)
    dims = struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + dims + a.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise TruncatedPayloadError(f"header needs {_HEAD.size} bytes, got {len(buf)}")
    magic, version, dtype, ndim, _reserved = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise TensorFormatError(f"unsupported dtype code {dtype}")
    off = _HEAD.size
    if len(buf) < off + 8 * ndim:
        raise TruncatedPayloadError("truncated dimension table")
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    need = off + 4 * count
    if len(buf) < need:
        raise TruncatedPayloadError(f"payload needs {4 * count} bytes, got {len(buf) - off}")
    if len(buf) > need:
        raise TensorFormatError(f"{len(buf) - need} trailing bytes after payload")
    a = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return a.astype(np.float32)


def write_tensor(m, path: str | os.PathLike) -> None:
    a = np.asarray(m, dtype=np.float32)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("refusing to write NaN or Inf")
    with open(path, "wb") as f:
        f.write(encode_tensor(a))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_tensor(f.read())
