"""Relative measurements between keyframe homography variables.

Variables are keyed by (submap_id, frame_id); each keyframe incidence gets
its own variable.  Three measurement sources exist:

* intra edges: rigid relative poses between consecutive keyframes of one
  submap, taken directly from the frontend's reported poses,
* inter edges: the calibration-ratio plus scale correction between the two
  copies of an overlap frame (no rotation or translation part),
* a 15-DoF point-alignment estimator kept as an ablation; it solves for an
  unconstrained homography from raw point correspondences and is
  rank-deficient on planar scenes, which is exactly why the inter edge
  above uses the constrained form.

Measurement convention: an edge (i, j, h) claims x_i = dehom(h @ x_j), so at
consistency h = h_i^-1 h_j for the cam-to-world variables h_i, h_j.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, InsufficientPointsError
from .geometry import affine_scale_to_sl4, se3_to_sl4, sl4_normalize
from .submap import Keyframe, Submap, back_project, confidence_mask

VarId = tuple[int, int]

SIGMA_INTRA = 1e-2
SIGMA_INTER = 1e-3
DEFAULT_MIN_POINTS = 100
DEFAULT_CONF_PERCENTILE = 0.25

INTRA = "intra"
INTER = "inter"
LOOP_INTRA = "loop_intra"
LOOP_INTER = "loop_inter"


@dataclass
class EdgeMeasurement:
    var_i: VarId
    var_j: VarId
    h_meas: np.ndarray   # (4, 4), unit determinant
    sigma: np.ndarray    # (15,) per-coordinate noise scale
    kind: str

    def __post_init__(self):
        self.h_meas = np.asarray(self.h_meas, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.h_meas.shape != (4, 4):
            raise DimensionMismatchError(f"h_meas must be (4, 4), got {self.h_meas.shape}")
        if self.sigma.shape != (15,) or np.any(self.sigma <= 0):
            raise DimensionMismatchError("sigma must be 15 positive entries")


def intra_edges(s: Submap, sigma: float = SIGMA_INTRA, kind: str = INTRA) -> list[EdgeMeasurement]:
    """Chain of rigid edges between consecutive keyframes of a submap."""
    edges = []
    sig = np.full(15, float(sigma))
    for a, b in zip(s.keyframes, s.keyframes[1:]):
        rel = np.linalg.solve(a.pose, b.pose)
        edges.append(EdgeMeasurement(
            var_i=(s.submap_id, a.frame_id),
            var_j=(s.submap_id, b.frame_id),
            h_meas=se3_to_sl4(rel),
            sigma=sig,
            kind=kind,
        ))
    return edges


def estimate_scale(x_i: np.ndarray, x_j: np.ndarray, a: np.ndarray,
                   mask: np.ndarray, min_points: int = DEFAULT_MIN_POINTS) -> float:
    """Median ratio ||a x_j|| / ||x_i|| over masked, non-degenerate pixels.

    Robust to outlier depths because of the median.  Raises
    InsufficientPointsError when fewer than ``min_points`` pixels survive
    the mask and the near-zero-norm skip.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape or x_i.shape[0] != 3 or x_i.ndim != 3:
        raise DimensionMismatchError(
            f"point grids must share shape (3, h, w), got {x_i.shape} vs {x_j.shape}"
        )
    if mask.shape != x_i.shape[1:]:
        raise DimensionMismatchError(f"mask shape {mask.shape} does not match grid {x_i.shape[1:]}")

    pts_i = x_i.reshape(3, -1).T[mask.ravel()]
    pts_j = x_j.reshape(3, -1).T[mask.ravel()]
    norms_i = np.linalg.norm(pts_i, axis=1)
    valid = norms_i > 1e-9
    if int(valid.sum()) < min_points:
        raise InsufficientPointsError(
            f"only {int(valid.sum())} valid pixels, need {min_points}"
        )
    mapped = pts_j[valid] @ np.asarray(a, dtype=np.float64).T
    ratios = np.linalg.norm(mapped, axis=1) / norms_i[valid]
    return float(np.median(ratios))


def inter_edge(kf_prev: Keyframe, kf_new: Keyframe,
               var_prev: VarId, var_new: VarId,
               conf_percentile: float = DEFAULT_CONF_PERCENTILE,
               min_points: int = DEFAULT_MIN_POINTS,
               sigma: float = SIGMA_INTER,
               kind: str = INTER) -> EdgeMeasurement:
    """Calibration plus scale correction between two copies of one frame.

    The two keyframes are the same physical frame as reconstructed by two
    different submaps.  The measurement maps the new copy's points onto the
    previous copy's: x_prev = (a @ x_new) / s with a = k_prev^-1 k_new and
    s the median point-norm ratio.
    """
    if kf_prev.frame_id != kf_new.frame_id:
        raise DimensionMismatchError(
            f"overlap copies must share frame_id, got {kf_prev.frame_id} vs {kf_new.frame_id}"
        )
    a = np.linalg.solve(kf_prev.k, kf_new.k)
    x_prev = back_project(kf_prev.k, kf_prev.depth)
    x_new = back_project(kf_new.k, kf_new.depth)
    mask = confidence_mask(kf_prev.conf, conf_percentile) & confidence_mask(
        kf_new.conf, conf_percentile
    )
    s = estimate_scale(x_prev, x_new, a, mask, min_points=min_points)
    return EdgeMeasurement(
        var_i=var_prev,
        var_j=var_new,
        h_meas=affine_scale_to_sl4(a, s),
        sigma=np.full(15, float(sigma)),
        kind=kind,
    )


def identity_inter_edge(var_prev: VarId, var_new: VarId,
                        sigma: float = SIGMA_INTER, kind: str = INTER) -> EdgeMeasurement:
    """Ablation edge that pretends the two overlap copies already agree."""
    return EdgeMeasurement(
        var_i=var_prev,
        var_j=var_new,
        h_meas=np.eye(4),
        sigma=np.full(15, float(sigma)),
        kind=kind,
    )


def estimate_h_15dof(x_i: np.ndarray, x_j: np.ndarray, mask: np.ndarray,
                     min_points: int = DEFAULT_MIN_POINTS,
                     rank_tol: float = 1e-8,
                     plane_tol: float = 0.03):
    """Unconstrained homography fit from 3D point correspondences (ablation).

    Solves the direct linear system for h with x_i = dehom(h @ x_j) and
    returns (h, degenerate, gap) where ``gap`` is the ratio between the
    15th and 1st singular values of the design matrix.

    Coplanar points admit a whole family of solutions (any valid h plus a
    rank-one update along the plane normal acts identically on the plane),
    so the system is rank deficient and the minimum-norm answer is
    arbitrary.  With exact coplanarity the singular value gap exposes
    this, but measurement noise lifts the null directions to the noise
    floor where the gap is indistinguishable from a weakly constrained
    valid fit.  The coplanarity itself is still directly measurable, so
    degeneracy is flagged when either test fires: ``gap < rank_tol`` or
    the thinnest principal extent of either cloud falls below
    ``plane_tol`` times its widest.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    pts_i = x_i.reshape(3, -1).T[mask.ravel()]
    pts_j = x_j.reshape(3, -1).T[mask.ravel()]
    if pts_i.shape[0] < max(min_points, 6):
        raise InsufficientPointsError(f"only {pts_i.shape[0]} correspondences")

    def normalizer(pts):
        centroid = pts.mean(axis=0)
        spread = np.mean(np.linalg.norm(pts - centroid, axis=1))
        scale = np.sqrt(3.0) / max(spread, 1e-12)
        t = np.eye(4)
        t[:3, :3] *= scale
        t[:3, 3] = -scale * centroid
        return t

    t_i = normalizer(pts_i)
    t_j = normalizer(pts_j)
    yi = pts_i * t_i[0, 0] + t_i[:3, 3]
    yj = pts_j * t_j[0, 0] + t_j[:3, 3]

    n = yi.shape[0]
    hom_j = np.hstack([yj, np.ones((n, 1))])
    rows = np.zeros((3 * n, 16))
    for axis in range(3):
        rows[axis::3, 4 * axis:4 * axis + 4] = hom_j
        rows[axis::3, 12:16] = -yi[:, axis:axis + 1] * hom_j

    _, svals, vt = np.linalg.svd(rows, full_matrices=True)
    gap = float(svals[14] / max(svals[0], 1e-300))

    def thinness(pts):
        extents = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        return float(extents[2] / max(extents[0], 1e-300))

    degenerate = (gap < rank_tol
                  or thinness(yi) < plane_tol
                  or thinness(yj) < plane_tol)
    h_norm = vt[-1].reshape(4, 4)
    h = np.linalg.solve(t_i, h_norm @ t_j)
    # The null vector is defined up to sign, and in even dimension both
    # signs have the same determinant; fix the homogeneous corner positive.
    anchor = h[3, 3] if abs(h[3, 3]) > 1e-12 else np.trace(h)
    if anchor < 0:
        h = -h
    if np.linalg.det(h) > 1e-12:
        h = sl4_normalize(h)
    return h, degenerate, gap
