"""
SPCT tensor files

Layout (all integers little-endian):
  4 bytes  magic "SPCT"
  1 byte   version (0x01)
  1 byte   dtype (0x01 = float32)
  1 byte   rank
  rank x uint32 dimensions
  payload, C order
"""
import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from src.backend import BackendError

MAGIC = b"SPCT"
VERSION = 1
DTYPE_FLOAT32 = 1
_HEADER = struct.Struct("<4sBBB")


class TensorFormatError(BackendError):
    """Malformed or unsupported tensor file"""

    pass


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f4")
    if array.ndim > 255:
        raise TensorFormatError(f"Rank {array.ndim} too large")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    return header + dims + array.tobytes(order="C")


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise TensorFormatError("Tensor data shorter than header")
    magic, version, dtype, rank = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"Bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"Unsupported tensor version {version}")
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError(f"Unsupported dtype code {dtype}")

    offset = _HEADER.size
    if len(data) < offset + 4 * rank:
        raise TensorFormatError("Truncated tensor dimensions")
    shape = struct.unpack_from(f"<{rank}I", data, offset)
    offset += 4 * rank

    expected = int(np.prod(shape, dtype=np.int64)) * 4
    payload = data[offset:]
    if len(payload) != expected:
        raise TensorFormatError(
            f"Payload has {len(payload)} bytes, shape {tuple(shape)} needs {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)


def write_tensor(path: Union[str, Path], array: np.ndarray):
    """Write atomically: readers never see a partial file"""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensor(array))
    os.replace(tmp, path)


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise TensorFormatError(f"Cannot read tensor file {path}: {e}") from e
    return decode_tensor(data)
