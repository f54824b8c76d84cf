"""Binary little-endian PLY writer for reconstructed point clouds.

Each vertex carries its world position, the confidence of the source pixel,
and the id of the frame that observed it, so downstream viewers can color or
filter the cloud per frame.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatchError

_DTYPE = np.dtype([
    ("x", "<f4"),
    ("y", "<f4"),
    ("z", "<f4"),
    ("confidence", "<f4"),
    ("frame_id", "<i4"),
])

_PROPERTIES = (
    "property float x",
    "property float y",
    "property float z",
    "property float confidence",
    "property int frame_id",
)


def _header(count: int) -> bytes:
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {count}",
        *_PROPERTIES,
        "end_header",
    ]
    return ("\n".join(lines) + "\n").encode("ascii")


def write_ply(path, points: np.ndarray, confidence: np.ndarray,
              frame_ids: np.ndarray) -> None:
    """Write a point cloud to ``path``.

    points is (n, 3); confidence and frame_ids are length n.  An empty cloud
    produces a valid file with zero vertices.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    confidence = np.asarray(confidence, dtype=np.float64).reshape(-1)
    frame_ids = np.asarray(frame_ids).reshape(-1)
    n = points.shape[0]
    if confidence.shape[0] != n or frame_ids.shape[0] != n:
        raise DimensionMismatchError(
            "points, confidence and frame_ids must have matching lengths, "
            f"got {n}, {confidence.shape[0]}, {frame_ids.shape[0]}")
    record = np.empty(n, dtype=_DTYPE)
    record["x"] = points[:, 0]
    record["y"] = points[:, 1]
    record["z"] = points[:, 2]
    record["confidence"] = confidence
    record["frame_id"] = frame_ids
    with open(path, "wb") as fh:
        fh.write(_header(n))
        fh.write(record.tobytes())


def read_ply(path):
    """Parse a file written by write_ply.

    Returns (points (n, 3) float64, confidence (n,) float64, frame_ids (n,)
    int64).  Only the exact property layout produced by write_ply is
    recognized.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"end_header\n"
    cut = blob.find(marker)
    if cut < 0:
        raise ValueError(f"{path}: missing PLY header terminator")
    header = blob[:cut].decode("ascii").splitlines()
    body = blob[cut + len(marker):]
    if header[0] != "ply" or header[1] != "format binary_little_endian 1.0":
        raise ValueError(f"{path}: not a binary little-endian PLY file")
    if not header[2].startswith("element vertex "):
        raise ValueError(f"{path}: expected vertex element, got {header[2]!r}")
    count = int(header[2].rsplit(" ", 1)[1])
    if tuple(header[3:8]) != _PROPERTIES:
        raise ValueError(f"{path}: unsupported property layout")
    record = np.frombuffer(body, dtype=_DTYPE, count=count)
    points = np.stack([record["x"], record["y"], record["z"]], axis=1)
    return (points.astype(np.float64),
            record["confidence"].astype(np.float64),
            record["frame_id"].astype(np.int64))
