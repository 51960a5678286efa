"""Binary tensor dumps and 8-bit PGM/PPM images.

Dump layout (little-endian)::

    b"EAET" | u8 version=1 | u8 dtype | u8 ndim | u8 pad | ndim x u32 dims | payload

dtype 0 is float32; 1 (float64) is accepted too so oracle tensors can be saved
without loss.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"EAET"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFormatError(ValueError):
    """A dump file does not follow the layout; ``offset`` is the first bad byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode_tensor(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    code = _CODES[arr.dtype]
    if arr.ndim > 255:
        raise ValueError("too many dims for the dump format")
    header = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> Tensor:
    if len(buf) < 8:
        raise TensorFormatError("truncated header", len(buf))
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {buf[:4]!r}", 0)
    version, code, ndim, _pad = struct.unpack_from("<BBBB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}", 4)
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}", 5)
    dims_end = 8 + 4 * ndim
    if len(buf) < dims_end:
        raise TensorFormatError("truncated dims", len(buf))
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = buf[dims_end:]
    if len(payload) != expected:
        raise TensorFormatError(
            f"payload has {len(payload)} bytes, dims {dims} need {expected}",
            dims_end + min(len(payload), expected),
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return Tensor(arr.astype(dtype.newbyteorder("="), copy=True))


def save_tensor(path: str | os.PathLike, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_tensor(t))


def load_tensor(path: str | os.PathLike) -> Tensor:
    with open(path, "rb") as f:
        return decode_tensor(f.read())


def normalize_u8(m: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; constant maps become all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM needs a 2-D uint8 array")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    """``img`` is H x W x 3 uint8."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("PPM needs an H x W x 3 uint8 array")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()
