"""Writer for the .vgsb binary array container.

The layout is the one the SLAM package reads, all little endian:

    bytes 0..3   magic "VGSB"
    bytes 4..5   u16 format version, currently 1
    byte  6      u8 dtype code: 1 = float32, 2 = float64
    byte  7      u8 rank
    next 4*rank  u32 dimensions
    rest         row-major payload

Only the writer lives here; the consumer side belongs to the SLAM
package and its tests parse these files with their own reader.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VGSB"
VERSION = 1
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_STORED = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_MAX_RANK = 8


def write_blob(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise ValueError(f"unsupported dtype {array.dtype}, use float32 or float64")
    if array.ndim == 0 or array.ndim > _MAX_RANK:
        raise ValueError(f"rank must be in 1..{_MAX_RANK}, got {array.ndim}")
    code = _CODES[array.dtype]
    header = MAGIC + struct.pack("<HBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array).astype(_STORED[code], copy=False).tobytes()
    Path(path).write_bytes(header + payload)
