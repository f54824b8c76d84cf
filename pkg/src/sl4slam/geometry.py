"""SL(4) manifold primitives and projective camera geometry.

Conventions
-----------
* Group elements are plain 4x4 float64 ndarrays with determinant +1.  Every
  constructor returns the normalized representative; callers should treat
  the arrays as immutable.
* A homography ``h`` acts on a 3D point ``x`` by lifting to homogeneous
  coordinates: ``y = dehom(h @ [x, 1])``.  Dehomogenization divides by the
  fourth coordinate and fails when ``|w| <= 1e-12``.
* Tangent vectors are length-15 coefficient vectors over the fixed
  generator basis below; perturbations compose on the right,
  ``h <- h @ sl4_exp(xi)``.

Tangent basis (index, generator, meaning):
    0..2   skew(e_x), skew(e_y), skew(e_z) in the 3x3 block   rotation
    3..5   E14, E24, E34                                      translation
    6..8   E12, E13, E23                                      calibration shear
    9      diag(1, -1, 0, 0)                                  calibration stretch
    10     diag(0, 1, -1, 0)                                  calibration stretch
    11..13 E41, E42, E43                                      projective row
    14     diag(1, 1, 1, -3)                                  scale vs block

The SE(3) sub-algebra is spanned by indices 0..5, so the log of an SE(3)
embedding reproduces the usual SE(3) tangent in those slots and zeros
elsewhere.
"""

import numpy as np

from . import kernels
from .errors import (
    DimensionMismatchError,
    LogDivergenceError,
    NonPositiveDeterminantError,
    PointAtInfinityError,
    SingularProjectionError,
)

DET_TOLERANCE = 1e-15
DEHOM_EPSILON = 1e-12
_LOG_ROUNDTRIP_RTOL = 1e-8


def _skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _build_generators() -> np.ndarray:
    gens = np.zeros((15, 4, 4))
    for i, axis in enumerate(np.eye(3)):
        gens[i, :3, :3] = _skew(axis)
    for i in range(3):
        gens[3 + i, i, 3] = 1.0
    gens[6, 0, 1] = 1.0
    gens[7, 0, 2] = 1.0
    gens[8, 1, 2] = 1.0
    gens[9, 0, 0] = 1.0
    gens[9, 1, 1] = -1.0
    gens[10, 1, 1] = 1.0
    gens[10, 2, 2] = -1.0
    for i in range(3):
        gens[11 + i, 3, i] = 1.0
    gens[14, 0, 0] = gens[14, 1, 1] = gens[14, 2, 2] = 1.0
    gens[14, 3, 3] = -3.0
    return gens


GENERATORS = _build_generators()
GENERATOR_LABELS = (
    "rot_x", "rot_y", "rot_z",
    "trans_x", "trans_y", "trans_z",
    "shear_xy", "shear_xz", "shear_yz",
    "stretch_xy", "stretch_yz",
    "proj_x", "proj_y", "proj_z",
    "scale",
)
# Least-squares projection of a (traceless) 4x4 matrix onto basis
# coefficients; exact on the span, and the trace direction is orthogonal to
# it, so any residual trace is discarded cleanly.
_BASIS_FLAT = GENERATORS.reshape(15, 16).T
_BASIS_PINV = np.linalg.pinv(_BASIS_FLAT)

TANGENT_DIM = 15


def tangent_matrix(xi: np.ndarray) -> np.ndarray:
    """Map tangent coefficients (..., 15) to 4x4 algebra matrices."""
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape[-1] != TANGENT_DIM:
        raise DimensionMismatchError(f"tangent must have length 15, got {xi.shape}")
    return np.tensordot(xi, GENERATORS, axes=([-1], [0]))


def tangent_coords(x: np.ndarray) -> np.ndarray:
    """Project 4x4 algebra matrices (..., 4, 4) onto basis coefficients."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[:-2] + (16,))
    return flat @ _BASIS_PINV.T


def sl4_normalize(m: np.ndarray) -> np.ndarray:
    """Scale a 4x4 matrix to determinant +1.

    Raises NonPositiveDeterminantError when det(m) <= 1e-15; the projective
    scale ambiguity only allows positive rescaling.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise DimensionMismatchError(f"expected (4, 4), got {m.shape}")
    det = float(np.linalg.det(m))
    if not np.isfinite(det) or det <= DET_TOLERANCE:
        raise NonPositiveDeterminantError(f"determinant {det:.3e} is not positive")
    out = m / det**0.25
    # One refinement pass keeps |det - 1| at the rounding floor.
    det2 = float(np.linalg.det(out))
    if det2 > 0 and abs(det2 - 1.0) > 1e-15:
        out = out / det2**0.25
    return out


def sl4_exp_many(xi: np.ndarray) -> np.ndarray:
    """Exponential map for a batch of tangents, shape (B, 15) -> (B, 4, 4)."""
    xi = np.asarray(xi, dtype=np.float64)
    if xi.ndim != 2 or xi.shape[1] != TANGENT_DIM:
        raise DimensionMismatchError(f"expected (B, 15), got {xi.shape}")
    return kernels.expm44_many(tangent_matrix(xi))


def sl4_exp(xi: np.ndarray) -> np.ndarray:
    """Exponential map of a single 15-vector tangent."""
    return sl4_exp_many(np.asarray(xi, dtype=np.float64)[None, :])[0]


def sl4_log_many(hs: np.ndarray) -> np.ndarray:
    """Principal log for a batch of group elements, (B, 4, 4) -> (B, 15).

    Every result is verified by exponentiating back; rows that fail to
    reproduce the input raise LogDivergenceError.  This catches both
    iteration failures and inputs outside the principal branch.
    """
    hs = np.asarray(hs, dtype=np.float64)
    if hs.ndim != 3 or hs.shape[1:] != (4, 4):
        raise DimensionMismatchError(f"expected (B, 4, 4), got {hs.shape}")
    logs, ok = kernels.logm44_many(hs)
    if np.all(ok):
        back = kernels.expm44_many(logs)
        scale = np.maximum(np.sqrt(np.sum(hs * hs, axis=(1, 2))), 1.0)
        err = np.sqrt(np.sum((back - hs) ** 2, axis=(1, 2))) / scale
        ok = err <= _LOG_ROUNDTRIP_RTOL
    if not np.all(ok):
        bad = np.where(~ok)[0]
        raise LogDivergenceError(
            f"matrix log failed for {bad.size} of {hs.shape[0]} matrices "
            f"(first failing index {bad[0]})"
        )
    return tangent_coords(logs)


def sl4_log(h: np.ndarray) -> np.ndarray:
    """Principal log of a single group element, returns a 15-vector."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (4, 4):
        raise DimensionMismatchError(f"expected (4, 4), got {h.shape}")
    return sl4_log_many(h[None])[0]


def sl4_compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Group composition with renormalization to keep det drift at bay."""
    return sl4_normalize(np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64))


def sl4_inverse(a: np.ndarray) -> np.ndarray:
    return sl4_normalize(np.linalg.inv(np.asarray(a, dtype=np.float64)))


def sl4_act(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a homography to points whose last axis is 3.

    Raises PointAtInfinityError if any homogeneous weight falls within
    1e-12 of zero.
    """
    h = np.asarray(h, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    if h.shape != (4, 4):
        raise DimensionMismatchError(f"expected (4, 4) homography, got {h.shape}")
    if pts.shape[-1] != 3:
        raise DimensionMismatchError(f"points must end with axis 3, got {pts.shape}")
    mapped = pts @ h[:3, :3].T + h[:3, 3]
    w = pts @ h[3, :3] + h[3, 3]
    if np.any(np.abs(w) <= DEHOM_EPSILON):
        raise PointAtInfinityError("homogeneous weight within 1e-12 of zero")
    return mapped / w[..., None]


def check_rotation(r: np.ndarray, tol: float = 1e-6) -> None:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise DimensionMismatchError(f"expected (3, 3), got {r.shape}")
    if not np.allclose(r.T @ r, np.eye(3), atol=tol) or np.linalg.det(r) < 0:
        raise DimensionMismatchError("not a proper rotation matrix")


def check_intrinsics(k: np.ndarray, tol: float = 1e-9) -> None:
    k = np.asarray(k, dtype=np.float64)
    if k.shape != (3, 3):
        raise DimensionMismatchError(f"expected (3, 3), got {k.shape}")
    lower = (abs(k[1, 0]) > tol) or (abs(k[2, 0]) > tol) or (abs(k[2, 1]) > tol)
    if lower or abs(k[2, 2] - 1.0) > tol or k[0, 0] <= 0 or k[1, 1] <= 0:
        raise DimensionMismatchError("not an upper-triangular intrinsics matrix")


def se3_to_sl4(t: np.ndarray) -> np.ndarray:
    """Embed a rigid transform [R|t; 0 1] as an SL(4) element."""
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (4, 4):
        raise DimensionMismatchError(f"expected (4, 4), got {t.shape}")
    if not np.allclose(t[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
        raise DimensionMismatchError("bottom row must be (0, 0, 0, 1)")
    check_rotation(t[:3, :3])
    return sl4_normalize(t)


def affine_scale_to_sl4(a: np.ndarray, s: float) -> np.ndarray:
    """Build the inter-submap correction [[a, 0], [0, s]] as an SL(4) element.

    ``a`` is the 3x3 calibration ratio and ``s`` the positive scale ratio;
    the action on a point is (a @ x) / s.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (3, 3):
        raise DimensionMismatchError(f"expected (3, 3), got {a.shape}")
    if not np.isfinite(s) or s <= 0:
        raise NonPositiveDeterminantError(f"scale must be positive, got {s}")
    h = np.zeros((4, 4))
    h[:3, :3] = a
    h[3, 3] = s
    return sl4_normalize(h)


def sl4_adjoint(h: np.ndarray) -> np.ndarray:
    """Adjoint of a group element as a 15x15 matrix on tangent coefficients."""
    h = np.asarray(h, dtype=np.float64)
    h_inv = np.linalg.inv(h)
    conjugated = h[None] @ GENERATORS @ h_inv[None]
    return tangent_coords(conjugated).T


def sl4_ad(x: np.ndarray) -> np.ndarray:
    """Little adjoint ad_X as a 15x15 matrix, X given as a 4x4 algebra element."""
    x = np.asarray(x, dtype=np.float64)
    brackets = x[None] @ GENERATORS - GENERATORS @ x[None]
    return tangent_coords(brackets).T


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Orthogonal Procrustes projection of a 3x3 matrix onto SO(3)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotvec_to_matrix(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula; safe for small angles."""
    w = np.asarray(w, dtype=np.float64)
    angle = float(np.linalg.norm(w))
    k = _skew(w)
    if angle < 1e-10:
        return np.eye(3) + k + 0.5 * (k @ k)
    return (
        np.eye(3)
        + np.sin(angle) / angle * k
        + (1.0 - np.cos(angle)) / angle**2 * (k @ k)
    )


def rq_decompose_projection(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a 3x4 projection into intrinsics and a rigid camera pose.

    Returns (k, pose) with ``k`` upper triangular, positive focal lengths,
    k[2,2] = 1, and ``pose`` the 4x4 cam-from-world rigid transform, such
    that p = lambda * k @ pose[:3, :] for some scalar lambda.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3, 4):
        raise DimensionMismatchError(f"expected (3, 4), got {p.shape}")
    m = p[:, :3]
    scale = np.linalg.norm(m)
    if scale == 0 or abs(np.linalg.det(m)) <= 1e-12 * scale**3:
        raise SingularProjectionError("camera block of the projection is singular")

    q_, r_ = np.linalg.qr(m[::-1, :].T)
    k = r_.T[::-1, ::-1]
    rot = q_.T[::-1, :]
    signs = np.sign(np.diag(k))
    k = k * signs[None, :]
    rot = rot * signs[:, None]
    if np.linalg.det(rot) < 0:
        rot = -rot

    kr = k @ rot
    lam = float(np.sum(m * kr) / np.sum(kr * kr))
    k22 = k[2, 2]
    k = k / k22
    lam = lam * k22
    t = np.linalg.solve(k, p[:, 3]) / lam

    pose = np.eye(4)
    pose[:3, :3] = rot
    pose[:3, 3] = t

    recon = lam * (k @ pose[:3, :])
    if np.linalg.norm(recon - p) > 1e-9 * max(1.0, np.linalg.norm(p)):
        raise SingularProjectionError("projection could not be reconstructed from factors")
    check_intrinsics(k)
    return k, pose
