"""Submap and keyframe records plus per-frame pixel geometry.

A submap is the unit handed over by the frontend: a short sequence of
keyframes with depth, confidence and intrinsics per frame, and rigid poses
expressed in the frame of the submap's first camera.  Consecutive regular
submaps share their boundary frame (the overlap frame), which is how the
backend chains them together.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError
from .geometry import check_intrinsics, check_rotation

REGULAR = "regular"
LOOP_CLOSURE = "loop_closure"


@dataclass
class Keyframe:
    frame_id: int
    timestamp: float
    pose: np.ndarray          # (4, 4) submap-from-camera rigid transform
    k: np.ndarray             # (3, 3) intrinsics reported by the frontend
    depth: np.ndarray         # (h, w)
    conf: np.ndarray          # (h, w), higher is more trustworthy
    descriptor: np.ndarray | None = None   # (d_desc,) unit norm
    query_tokens: np.ndarray | None = None  # (n_tok, d_tok)
    key_tokens: np.ndarray | None = None    # (n_tok, d_tok)

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise DimensionMismatchError(f"pose must be (4, 4), got {self.pose.shape}")
        if not np.allclose(self.pose[3], [0, 0, 0, 1], atol=1e-9):
            raise DimensionMismatchError("pose bottom row must be (0, 0, 0, 1)")
        check_rotation(self.pose[:3, :3])
        check_intrinsics(self.k)
        if self.depth.shape != self.conf.shape or self.depth.ndim != 2:
            raise DimensionMismatchError(
                f"depth {self.depth.shape} and conf {self.conf.shape} must be equal 2D shapes"
            )


@dataclass
class Submap:
    submap_id: int
    kind: str
    keyframes: list[Keyframe] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in (REGULAR, LOOP_CLOSURE):
            raise DimensionMismatchError(f"unknown submap kind {self.kind!r}")
        if len(self.keyframes) < 2:
            raise DimensionMismatchError("submap needs at least two keyframes")
        if self.kind == LOOP_CLOSURE and len(self.keyframes) != 2:
            raise DimensionMismatchError("loop-closure submap must have exactly two keyframes")
        first = self.keyframes[0]
        if not np.allclose(first.pose, np.eye(4), atol=1e-9):
            raise DimensionMismatchError("first keyframe pose must be the identity")
        ids = [kf.frame_id for kf in self.keyframes]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise DimensionMismatchError("keyframe ids must be strictly increasing")

    @property
    def frame_ids(self) -> list[int]:
        return [kf.frame_id for kf in self.keyframes]


def pixel_rays(k: np.ndarray, height: int, width: int) -> np.ndarray:
    """Unnormalized camera rays K^-1 (u, v, 1) per pixel, shape (3, h, w).

    Pixel coordinates are zero-indexed pixel centers, u along width.
    """
    check_intrinsics(k)
    u, v = np.meshgrid(np.arange(width, dtype=np.float64),
                       np.arange(height, dtype=np.float64))
    ones = np.ones_like(u)
    pix = np.stack([u, v, ones]).reshape(3, -1)
    rays = np.linalg.solve(k, pix)
    return rays.reshape(3, height, width)


def back_project(k: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Camera-frame point grid X(u,v) = depth(u,v) * K^-1 (u, v, 1)^T.

    Returns shape (3, h, w); zero-depth pixels map to the origin.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise DimensionMismatchError(f"depth must be 2D, got {depth.shape}")
    h, w = depth.shape
    return pixel_rays(k, h, w) * depth[None, :, :]


def confidence_mask(conf: np.ndarray, percentile: float) -> np.ndarray:
    """Boolean mask keeping pixels at or above the given confidence quantile.

    ``percentile`` is a fraction in [0, 1); the threshold uses linear
    interpolation between order statistics, ties are kept.
    """
    if not 0.0 <= percentile < 1.0:
        raise DimensionMismatchError(f"percentile must be in [0, 1), got {percentile}")
    conf = np.asarray(conf, dtype=np.float64)
    threshold = np.quantile(conf, percentile)
    return conf >= threshold
