"""Trajectory files, timestamp association and ATE computation.

Trajectory text format, one pose per line:
    timestamp tx ty tz qx qy qz qw
with '#' comment lines and blank lines ignored.  Alignment offers a full
similarity fit (rotation, translation, scale) or a rigid fit with unit
scale; both use the closed-form least-squares solution with the
determinant-sign correction, so mirrored inputs still yield a proper
rotation.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateConfigurationError,
    DimensionMismatchError,
    NoAssociationsError,
    ParseError,
)

DEFAULT_MAX_DT = 0.02


@dataclass
class Trajectory:
    times: np.ndarray       # (n,)
    positions: np.ndarray   # (n, 3)
    quaternions: np.ndarray  # (n, 4) in (qx, qy, qz, qw) order

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.quaternions = np.asarray(self.quaternions, dtype=np.float64)
        n = self.times.shape[0]
        if self.positions.shape != (n, 3) or self.quaternions.shape != (n, 4):
            raise DimensionMismatchError("trajectory arrays disagree on length")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise DimensionMismatchError("timestamps must be strictly increasing")

    def __len__(self):
        return int(self.times.shape[0])


def rotation_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion in (qx, qy, qz, qw) order."""
    r = np.asarray(r, dtype=np.float64)
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        qw = 0.25 * s
        qx = (r[2, 1] - r[1, 2]) / s
        qy = (r[0, 2] - r[2, 0]) / s
        qz = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        qw = (r[2, 1] - r[1, 2]) / s
        qx = 0.25 * s
        qy = (r[0, 1] + r[1, 0]) / s
        qz = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        qw = (r[0, 2] - r[2, 0]) / s
        qx = (r[0, 1] + r[1, 0]) / s
        qy = 0.25 * s
        qz = (r[1, 2] + r[2, 1]) / s
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        qw = (r[1, 0] - r[0, 1]) / s
        qx = (r[0, 2] + r[2, 0]) / s
        qy = (r[1, 2] + r[2, 1]) / s
        qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    return q / np.linalg.norm(q)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Quaternion (qx, qy, qz, qw) to rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def parse_tum(path) -> Trajectory:
    times, positions, quats = [], [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 8:
                raise ParseError(f"expected 8 fields, got {len(parts)}", lineno)
            try:
                values = [float(p) for p in parts]
            except ValueError:
                raise ParseError(f"non-numeric field in {stripped!r}", lineno) from None
            if times and values[0] <= times[-1]:
                raise ParseError("timestamps must be strictly increasing", lineno)
            times.append(values[0])
            positions.append(values[1:4])
            quats.append(values[4:8])
    if not times:
        return Trajectory(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)))
    return Trajectory(np.array(times), np.array(positions), np.array(quats))


def write_tum(path, trajectory: Trajectory) -> None:
    lines = []
    for t, p, q in zip(trajectory.times, trajectory.positions, trajectory.quaternions):
        fields = [f"{t:.9f}"] + [f"{v:.12g}" for v in (*p, *q)]
        lines.append(" ".join(fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def associate(a: Trajectory, b: Trajectory, max_dt: float = DEFAULT_MAX_DT):
    """Greedy nearest-timestamp pairing; each pose is used at most once.

    Returns a list of index pairs (ia, ib) sorted by ia.  Raises
    NoAssociationsError when nothing matches within the window.
    """
    candidates = []
    for ia, ta in enumerate(a.times):
        lo = np.searchsorted(b.times, ta - max_dt, side="left")
        hi = np.searchsorted(b.times, ta + max_dt, side="right")
        for ib in range(lo, hi):
            candidates.append((abs(ta - b.times[ib]), ia, ib))
    candidates.sort()
    used_a, used_b = set(), set()
    pairs = []
    for _, ia, ib in candidates:
        if ia in used_a or ib in used_b:
            continue
        used_a.add(ia)
        used_b.add(ib)
        pairs.append((ia, ib))
    if not pairs:
        raise NoAssociationsError(f"no timestamp pairs within {max_dt} s")
    pairs.sort()
    return pairs


def umeyama_alignment(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Least-squares similarity (or rigid) transform mapping src onto dst.

    Returns (scale, rotation, translation) minimizing
    sum ||dst_i - (s R src_i + t)||^2.  Degenerate inputs (fewer than three
    points, coincident or collinear clouds) raise
    DegenerateConfigurationError.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise DimensionMismatchError(f"point sets must both be (n, 3), got {src.shape} vs {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise DegenerateConfigurationError(f"need at least 3 points, got {n}")

    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst
    var_src = np.mean(np.sum(src_c**2, axis=1))
    cov = dst_c.T @ src_c / n

    u, d, vt = np.linalg.svd(cov)
    if var_src < 1e-18 or d[1] <= 1e-12 * max(d[0], 1e-300):
        raise DegenerateConfigurationError("source cloud is coincident or collinear")
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    if with_scale:
        scale = float(np.trace(np.diag(d) @ s_fix) / var_src)
    else:
        scale = 1.0
    trans = mu_dst - scale * rot @ mu_src
    return scale, rot, trans


@dataclass
class AteResult:
    rmse: float
    mean: float
    median: float
    max: float
    pairs: int
    scale: float


def ate_rmse(est: Trajectory, gt: Trajectory, mode: str = "sim3",
             max_dt: float = DEFAULT_MAX_DT) -> AteResult:
    """Absolute trajectory error after aligning est onto gt.

    mode "sim3" fits scale, rotation and translation; mode "se3" forces
    unit scale.
    """
    if mode not in ("sim3", "se3"):
        raise DimensionMismatchError(f"mode must be sim3 or se3, got {mode!r}")
    pairs = associate(est, gt, max_dt)
    idx_e = [p[0] for p in pairs]
    idx_g = [p[1] for p in pairs]
    src = est.positions[idx_e]
    dst = gt.positions[idx_g]
    scale, rot, trans = umeyama_alignment(src, dst, with_scale=(mode == "sim3"))
    residuals = dst - (scale * src @ rot.T + trans)
    norms = np.linalg.norm(residuals, axis=1)
    return AteResult(
        rmse=float(np.sqrt(np.mean(norms**2))),
        mean=float(np.mean(norms)),
        median=float(np.median(norms)),
        max=float(np.max(norms)),
        pairs=len(pairs),
        scale=float(scale),
    )
