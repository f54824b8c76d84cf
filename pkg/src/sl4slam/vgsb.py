"""Binary array blobs used by dataset directories.

Layout, all little endian:
    bytes 0..3   magic "VGSB"
    bytes 4..5   u16 format version, currently 1
    byte  6      u8 dtype code: 1 = float32, 2 = float64
    byte  7      u8 rank
    next 4*rank  u32 dimensions
    rest         row-major payload
"""

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"VGSB"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_MAX_RANK = 8


def write_blob(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {array.dtype}, use float32 or float64")
    if array.ndim == 0 or array.ndim > _MAX_RANK:
        raise FormatError(f"rank must be in 1..{_MAX_RANK}, got {array.ndim}")
    code = _CODES[array.dtype]
    header = MAGIC + struct.pack("<HBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array).astype(_DTYPES[code], copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def read_blob(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, code, rank = struct.unpack("<HBB", raw[4:8])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if not 1 <= rank <= _MAX_RANK:
        raise FormatError(f"{path}: bad rank {rank}")
    dim_end = 8 + 4 * rank
    if len(raw) < dim_end:
        raise FormatError(f"{path}: truncated dimension list")
    dims = struct.unpack(f"<{rank}I", raw[8:dim_end])
    dtype = _DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = raw[dim_end:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} for dims {dims}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
