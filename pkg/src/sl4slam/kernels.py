"""Hot numeric kernels with two interchangeable backends.

Every kernel here has a pure-numpy implementation (``*_numpy``) and, when
numba is importable, a compiled counterpart (``*_numba``).  The module-level
names ``expm44_many``, ``logm44_many`` and ``raycast`` are bound to one
backend at import time.  Set the environment variable ``SL4SLAM_NUMBA=0``
to force the numpy path; anything else (or unset) uses numba when available.
``benchmarks/bench_kernels.py`` times both paths side by side.

Matrix exp is scaling-and-squaring with a Taylor core.  Matrix log is
inverse scaling-and-squaring: Denman-Beavers square roots until the matrix
is near identity, then a Gregory (atanh) series.  Callers are expected to
verify log results by round-trip (see geometry.sl4_log); kernels only
report hard failures through status flags.
"""

import os

import numpy as np

_EXP_TAYLOR_TERMS = 14
_LOG_SERIES_TERMS = 12
_NEAR_IDENTITY = 0.25
_MAX_SQRT_LEVELS = 40
_MAX_DB_ITERS = 30
_MAX_SCALING_SQUARINGS = 64

_I4 = np.eye(4)


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


def expm44_many_numpy(xs: np.ndarray) -> np.ndarray:
    """Matrix exponential of a stack of 4x4 matrices, shape (B, 4, 4)."""
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    norms = np.sqrt(np.sum(xs * xs, axis=(1, 2)))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.ceil(np.log2(norms / _NEAR_IDENTITY))
    s = np.clip(np.nan_to_num(s, nan=0.0, posinf=_MAX_SCALING_SQUARINGS, neginf=0.0),
                0, _MAX_SCALING_SQUARINGS).astype(np.int64)
    a = xs * (0.5 ** s)[:, None, None]

    out = np.broadcast_to(_I4, a.shape).copy()
    term = np.broadcast_to(_I4, a.shape).copy()
    for k in range(1, _EXP_TAYLOR_TERMS + 1):
        term = term @ a / k
        out += term

    live = s > 0
    while np.any(live):
        out[live] = out[live] @ out[live]
        s = s - 1
        live = s > 0
    return out


def logm44_many_numpy(ms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Principal matrix log of a stack of 4x4 matrices.

    Returns (logs, ok) where ok is a boolean vector; rows with ok=False did
    not converge and hold garbage.
    """
    a = np.array(ms, dtype=np.float64)
    b = a.shape[0]
    ok = np.all(np.isfinite(a), axis=(1, 2))
    k = np.zeros(b, dtype=np.int64)

    for _ in range(_MAX_SQRT_LEVELS):
        dist = np.sqrt(np.sum((a - _I4) ** 2, axis=(1, 2)))
        active = ok & (dist > _NEAR_IDENTITY)
        if not np.any(active):
            break
        roots, root_ok = _sqrtm44_db_numpy(a[active])
        a[active] = roots
        ok[active] &= root_ok
        k[active] += 1
    else:
        dist = np.sqrt(np.sum((a - _I4) ** 2, axis=(1, 2)))
        ok &= dist <= _NEAR_IDENTITY

    # Gregory series on the reduced matrices: log(a) = 2*atanh(s) with
    # s = (a - I)(a + I)^-1, summed over odd powers.
    s_mat = np.zeros_like(a)
    idx = np.where(ok)[0]
    if idx.size:
        denom = a[idx] + _I4
        good = np.abs(np.linalg.det(denom)) > 1e-300
        use = idx[good]
        ok[idx[~good]] = False
        if use.size:
            s_mat[use] = np.linalg.solve(
                np.transpose(denom[good], (0, 2, 1)),
                np.transpose(a[use] - _I4, (0, 2, 1)),
            ).transpose(0, 2, 1)

    p = s_mat.copy()
    s2 = s_mat @ s_mat
    logs = np.zeros_like(a)
    for j in range(_LOG_SERIES_TERMS):
        logs += p / (2 * j + 1)
        p = p @ s2
    logs *= 2.0 * (2.0 ** k)[:, None, None]
    logs[~ok] = 0.0
    return logs, ok


def _sqrtm44_db_numpy(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Denman-Beavers principal square root of a stack of 4x4 matrices."""
    y = a.copy()
    z = np.broadcast_to(_I4, a.shape).copy()
    ok = np.ones(a.shape[0], dtype=bool)
    converged = np.zeros(a.shape[0], dtype=bool)
    for _ in range(_MAX_DB_ITERS):
        live = ok & ~converged
        if not np.any(live):
            break
        yl, zl = y[live], z[live]
        det_y = np.abs(np.linalg.det(yl)) > 1e-300
        det_z = np.abs(np.linalg.det(zl)) > 1e-300
        good = det_y & det_z
        live_idx = np.where(live)[0]
        ok[live_idx[~good]] = False
        sel = live_idx[good]
        if sel.size == 0:
            continue
        yi = np.linalg.inv(y[sel])
        zi = np.linalg.inv(z[sel])
        yn = 0.5 * (y[sel] + zi)
        zn = 0.5 * (z[sel] + yi)
        step = np.sqrt(np.sum((yn - y[sel]) ** 2, axis=(1, 2)))
        scale = np.sqrt(np.sum(yn**2, axis=(1, 2)))
        y[sel] = yn
        z[sel] = zn
        converged[sel] = step <= 1e-14 * np.maximum(scale, 1.0)
    ok &= converged & np.all(np.isfinite(y), axis=(1, 2))
    return y, ok


def raycast_numpy(origin, dirs, room, spheres, boxes):
    """Nearest-hit parameter t along each ray from a point inside the room.

    origin (3,), dirs (N, 3), room (6,) as [min_xyz, max_xyz], spheres
    (S, 4) as [center, radius], boxes (B, 6) as [min_xyz, max_xyz].
    Returns t (N,), inf where nothing is hit.
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)

    # Exit point through the room walls (camera is inside the box).
    for axis in range(3):
        d = dirs[:, axis]
        with np.errstate(divide="ignore"):
            t_hi = (room[3 + axis] - origin[axis]) / d
            t_lo = (room[axis] - origin[axis]) / d
        t_wall = np.where(d > 1e-12, t_hi, np.where(d < -1e-12, t_lo, np.inf))
        hit = (t_wall > 1e-9) & (t_wall < t_best)
        t_best[hit] = t_wall[hit]

    for s in range(spheres.shape[0]):
        oc = origin - spheres[s, :3]
        a = np.sum(dirs * dirs, axis=1)
        b = 2.0 * dirs @ oc
        c = oc @ oc - spheres[s, 3] ** 2
        disc = b * b - 4.0 * a * c
        valid = disc >= 0.0
        sq = np.sqrt(np.where(valid, disc, 0.0))
        t1 = (-b - sq) / (2.0 * a)
        t2 = (-b + sq) / (2.0 * a)
        t_hit = np.where(t1 > 1e-9, t1, np.where(t2 > 1e-9, t2, np.inf))
        t_hit = np.where(valid, t_hit, np.inf)
        closer = t_hit < t_best
        t_best[closer] = t_hit[closer]

    for bx in range(boxes.shape[0]):
        tmin = np.full(n, -np.inf)
        tmax = np.full(n, np.inf)
        inside_slabs = np.ones(n, dtype=bool)
        for axis in range(3):
            d = dirs[:, axis]
            parallel = np.abs(d) < 1e-12
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (boxes[bx, axis] - origin[axis]) / d
                t2 = (boxes[bx, 3 + axis] - origin[axis]) / d
            lo = np.minimum(t1, t2)
            hi = np.maximum(t1, t2)
            tmin = np.where(parallel, tmin, np.maximum(tmin, lo))
            tmax = np.where(parallel, tmax, np.minimum(tmax, hi))
            out_slab = parallel & (
                (origin[axis] < boxes[bx, axis]) | (origin[axis] > boxes[bx, 3 + axis])
            )
            inside_slabs &= ~out_slab
        hit = inside_slabs & (tmax >= tmin)
        t_hit = np.where(tmin > 1e-9, tmin, np.where(tmax > 1e-9, tmax, np.inf))
        t_hit = np.where(hit, t_hit, np.inf)
        closer = t_hit < t_best
        t_best[closer] = t_hit[closer]

    return t_best


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

_env = os.environ.get("SL4SLAM_NUMBA", "1")
_want_numba = _env not in ("0", "false", "no")

try:  # pragma: no cover - exercised indirectly by the dispatch test
    if not _want_numba:
        raise ImportError("numba disabled by SL4SLAM_NUMBA")
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    njit = None
    _HAVE_NUMBA = False


if _HAVE_NUMBA:

    @njit(cache=True)
    def _mat4_mul(a, b, out):
        for i in range(4):
            for j in range(4):
                acc = 0.0
                for k in range(4):
                    acc += a[i, k] * b[k, j]
                out[i, j] = acc

    @njit(cache=True)
    def _mat4_inv(a, out):
        aug = np.empty((4, 8))
        for i in range(4):
            for j in range(4):
                aug[i, j] = a[i, j]
                aug[i, 4 + j] = 1.0 if i == j else 0.0
        for col in range(4):
            piv_row = col
            best = abs(aug[col, col])
            for r in range(col + 1, 4):
                if abs(aug[r, col]) > best:
                    best = abs(aug[r, col])
                    piv_row = r
            if best < 1e-300:
                return False
            if piv_row != col:
                for c in range(8):
                    tmp = aug[col, c]
                    aug[col, c] = aug[piv_row, c]
                    aug[piv_row, c] = tmp
            piv = aug[col, col]
            for c in range(8):
                aug[col, c] /= piv
            for r in range(4):
                if r != col and aug[r, col] != 0.0:
                    f = aug[r, col]
                    for c in range(8):
                        aug[r, c] -= f * aug[col, c]
        for i in range(4):
            for j in range(4):
                out[i, j] = aug[i, 4 + j]
        return True

    @njit(cache=True)
    def _expm44_one(x, out):
        norm = 0.0
        for i in range(4):
            for j in range(4):
                norm += x[i, j] * x[i, j]
        norm = np.sqrt(norm)
        s = 0
        if norm > _NEAR_IDENTITY:
            s = int(np.ceil(np.log2(norm / _NEAR_IDENTITY)))
            if s > _MAX_SCALING_SQUARINGS:
                s = _MAX_SCALING_SQUARINGS
        scale = 0.5**s
        a = np.empty((4, 4))
        for i in range(4):
            for j in range(4):
                a[i, j] = x[i, j] * scale
        term = np.eye(4)
        for i in range(4):
            for j in range(4):
                out[i, j] = 1.0 if i == j else 0.0
        tmp = np.empty((4, 4))
        for k in range(1, _EXP_TAYLOR_TERMS + 1):
            _mat4_mul(term, a, tmp)
            inv_k = 1.0 / k
            for i in range(4):
                for j in range(4):
                    term[i, j] = tmp[i, j] * inv_k
                    out[i, j] += term[i, j]
        for _ in range(s):
            _mat4_mul(out, out, tmp)
            for i in range(4):
                for j in range(4):
                    out[i, j] = tmp[i, j]

    @njit(cache=True)
    def _expm44_batch(xs, out):
        for b in range(xs.shape[0]):
            _expm44_one(xs[b], out[b])

    @njit(cache=True)
    def _dist_to_identity(a):
        acc = 0.0
        for i in range(4):
            for j in range(4):
                d = a[i, j] - (1.0 if i == j else 0.0)
                acc += d * d
        return np.sqrt(acc)

    @njit(cache=True)
    def _sqrtm44_db_one(a, out):
        y = a.copy()
        z = np.eye(4)
        yi = np.empty((4, 4))
        zi = np.empty((4, 4))
        yn = np.empty((4, 4))
        for _ in range(_MAX_DB_ITERS):
            if not _mat4_inv(y, yi):
                return False
            if not _mat4_inv(z, zi):
                return False
            step = 0.0
            scale = 0.0
            for i in range(4):
                for j in range(4):
                    yn[i, j] = 0.5 * (y[i, j] + zi[i, j])
                    z[i, j] = 0.5 * (z[i, j] + yi[i, j])
                    d = yn[i, j] - y[i, j]
                    step += d * d
                    scale += yn[i, j] * yn[i, j]
                    y[i, j] = yn[i, j]
            if step <= (1e-14 * max(np.sqrt(scale), 1.0)) ** 2:
                for i in range(4):
                    for j in range(4):
                        out[i, j] = y[i, j]
                        if not np.isfinite(out[i, j]):
                            return False
                return True
        return False

    @njit(cache=True)
    def _logm44_one(m, out):
        a = m.copy()
        root = np.empty((4, 4))
        k = 0
        reduced = False
        for _ in range(_MAX_SQRT_LEVELS):
            if not np.all(np.isfinite(a)):
                return False
            if _dist_to_identity(a) <= _NEAR_IDENTITY:
                reduced = True
                break
            if not _sqrtm44_db_one(a, root):
                return False
            for i in range(4):
                for j in range(4):
                    a[i, j] = root[i, j]
            k += 1
        if not reduced:
            return False
        denom = np.empty((4, 4))
        numer = np.empty((4, 4))
        for i in range(4):
            for j in range(4):
                denom[i, j] = a[i, j] + (1.0 if i == j else 0.0)
                numer[i, j] = a[i, j] - (1.0 if i == j else 0.0)
        denom_inv = np.empty((4, 4))
        if not _mat4_inv(denom, denom_inv):
            return False
        s_mat = np.empty((4, 4))
        _mat4_mul(numer, denom_inv, s_mat)
        s2 = np.empty((4, 4))
        _mat4_mul(s_mat, s_mat, s2)
        p = s_mat.copy()
        tmp = np.empty((4, 4))
        for i in range(4):
            for j in range(4):
                out[i, j] = 0.0
        for t in range(_LOG_SERIES_TERMS):
            coeff = 1.0 / (2 * t + 1)
            for i in range(4):
                for j in range(4):
                    out[i, j] += p[i, j] * coeff
            _mat4_mul(p, s2, tmp)
            for i in range(4):
                for j in range(4):
                    p[i, j] = tmp[i, j]
        factor = 2.0 * (2.0**k)
        for i in range(4):
            for j in range(4):
                out[i, j] *= factor
        return True

    @njit(cache=True)
    def _logm44_batch(ms, out, ok):
        for b in range(ms.shape[0]):
            ok[b] = _logm44_one(ms[b], out[b])

    @njit(cache=True)
    def _raycast_nb(origin, dirs, room, spheres, boxes, out):
        n = dirs.shape[0]
        for i in range(n):
            dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
            t_best = np.inf
            for axis in range(3):
                d = dirs[i, axis]
                if d > 1e-12:
                    tc = (room[3 + axis] - origin[axis]) / d
                elif d < -1e-12:
                    tc = (room[axis] - origin[axis]) / d
                else:
                    continue
                if 1e-9 < tc < t_best:
                    t_best = tc
            for s in range(spheres.shape[0]):
                ocx = origin[0] - spheres[s, 0]
                ocy = origin[1] - spheres[s, 1]
                ocz = origin[2] - spheres[s, 2]
                a = dx * dx + dy * dy + dz * dz
                bq = 2.0 * (dx * ocx + dy * ocy + dz * ocz)
                cq = ocx * ocx + ocy * ocy + ocz * ocz - spheres[s, 3] ** 2
                disc = bq * bq - 4.0 * a * cq
                if disc < 0.0:
                    continue
                sq = np.sqrt(disc)
                t1 = (-bq - sq) / (2.0 * a)
                t2 = (-bq + sq) / (2.0 * a)
                tc = t1 if t1 > 1e-9 else (t2 if t2 > 1e-9 else np.inf)
                if tc < t_best:
                    t_best = tc
            for bx in range(boxes.shape[0]):
                tmin = -np.inf
                tmax = np.inf
                ok_box = True
                for axis in range(3):
                    d = dirs[i, axis]
                    if abs(d) < 1e-12:
                        if origin[axis] < boxes[bx, axis] or origin[axis] > boxes[bx, 3 + axis]:
                            ok_box = False
                            break
                    else:
                        t1 = (boxes[bx, axis] - origin[axis]) / d
                        t2 = (boxes[bx, 3 + axis] - origin[axis]) / d
                        if t1 > t2:
                            t1, t2 = t2, t1
                        if t1 > tmin:
                            tmin = t1
                        if t2 < tmax:
                            tmax = t2
                if ok_box and tmax >= tmin:
                    tc = tmin if tmin > 1e-9 else (tmax if tmax > 1e-9 else np.inf)
                    if tc < t_best:
                        t_best = tc
            out[i] = t_best

    def expm44_many_numba(xs: np.ndarray) -> np.ndarray:
        xs = np.ascontiguousarray(xs, dtype=np.float64)
        out = np.empty_like(xs)
        _expm44_batch(xs, out)
        return out

    def logm44_many_numba(ms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ms = np.ascontiguousarray(ms, dtype=np.float64)
        out = np.zeros_like(ms)
        ok = np.empty(ms.shape[0], dtype=np.bool_)
        _logm44_batch(ms, out, ok)
        return out, ok

    def raycast_numba(origin, dirs, room, spheres, boxes):
        origin = np.ascontiguousarray(origin, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        room = np.ascontiguousarray(room, dtype=np.float64)
        spheres = np.ascontiguousarray(spheres, dtype=np.float64).reshape(-1, 4)
        boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 6)
        out = np.empty(dirs.shape[0])
        _raycast_nb(origin, dirs, room, spheres, boxes, out)
        return out

else:
    expm44_many_numba = None
    logm44_many_numba = None
    raycast_numba = None


USING_NUMBA = _HAVE_NUMBA

if USING_NUMBA:
    expm44_many = expm44_many_numba
    logm44_many = logm44_many_numba
    raycast = raycast_numba
else:
    expm44_many = expm44_many_numpy
    logm44_many = logm44_many_numpy
    raycast = raycast_numpy
