"""Factor graph over SL(4) variables and its batch optimizer.

The residual of an edge (i, j, h_meas) is

    r = log(h_meas^-1 h_i^-1 h_j) / sigma    (coefficient-wise whitening)

and priors use r = log(h_prior^-1 h) / sigma.  Perturbations are applied on
the right, h <- h @ exp(xi), so Jacobians are taken with respect to the
right tangent.  The default Jacobian is a central finite difference with
step 1e-6; an analytic path based on the inverse-dexp series is available
as a cross-checked fast alternative.  Linearization evaluates all residual
blocks in one batched matrix-log call; assembly order is fixed by the
sorted variable ids, so results are deterministic.

The gauge must be fixed by at least one prior (see anchor_first); an
unanchored graph is refused before any linear algebra happens.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .alignment import EdgeMeasurement, VarId
from .errors import (
    DimensionMismatchError,
    GaugeDeficientError,
    LogDivergenceError,
)
from .geometry import (
    GENERATORS,
    TANGENT_DIM,
    sl4_ad,
    sl4_adjoint,
    sl4_log,
    tangent_coords,
    tangent_matrix,
)

SIGMA_ANCHOR = 1e-6

# Bernoulli-number coefficients B_n^+ / n! of the inverse right-Jacobian
# series; odd terms beyond n=1 vanish.
_DEXPINV_COEFFS = {
    0: 1.0,
    1: 0.5,
    2: 1.0 / 12.0,
    4: -1.0 / 720.0,
    6: 1.0 / 30240.0,
    8: -1.0 / 1209600.0,
    10: 5.0 / (66.0 * math.factorial(10)),
    12: -691.0 / (2730.0 * math.factorial(12)),
    14: 7.0 / (6.0 * math.factorial(14)),
}


@dataclass
class PriorFactor:
    var: VarId
    h_prior: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.h_prior = np.asarray(self.h_prior, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.h_prior.shape != (4, 4):
            raise DimensionMismatchError("prior must be a 4x4 element")
        if self.sigma.shape != (TANGENT_DIM,) or np.any(self.sigma <= 0):
            raise DimensionMismatchError("prior sigma must be 15 positive entries")


@dataclass
class Graph:
    edges: list[EdgeMeasurement] = field(default_factory=list)
    priors: list[PriorFactor] = field(default_factory=list)

    def __post_init__(self):
        self._vars: list[VarId] = []
        self._var_set: set[VarId] = set()

    def add_variable(self, var: VarId) -> None:
        if var in self._var_set:
            raise DimensionMismatchError(f"variable {var} already exists")
        self._var_set.add(var)
        self._vars.append(var)

    def has_variable(self, var: VarId) -> bool:
        return var in self._var_set

    def add_edge(self, edge: EdgeMeasurement) -> None:
        if edge.var_i not in self._var_set or edge.var_j not in self._var_set:
            raise DimensionMismatchError(
                f"edge references unknown variable {edge.var_i} or {edge.var_j}"
            )
        if edge.var_i == edge.var_j:
            raise DimensionMismatchError("edge endpoints must differ")
        self.edges.append(edge)

    def add_prior(self, var: VarId, h_prior: np.ndarray, sigma: np.ndarray) -> bool:
        """Add a prior unless an identical one exists; returns True if added."""
        if var not in self._var_set:
            raise DimensionMismatchError(f"prior references unknown variable {var}")
        candidate = PriorFactor(var, h_prior, sigma)
        for p in self.priors:
            if (p.var == var and np.allclose(p.h_prior, candidate.h_prior, atol=1e-12)
                    and np.allclose(p.sigma, candidate.sigma, atol=1e-15)):
                return False
        self.priors.append(candidate)
        return True

    @property
    def variables(self) -> list[VarId]:
        return sorted(self._vars)

    def insertion_order(self) -> list[VarId]:
        return list(self._vars)


def anchor_first(graph: Graph, sigma: float = SIGMA_ANCHOR) -> bool:
    """Pin the first variable (sorted order) to the identity.

    Idempotent: calling twice leaves a single prior in place.
    """
    variables = graph.variables
    if not variables:
        raise GaugeDeficientError("cannot anchor an empty graph")
    return graph.add_prior(variables[0], np.eye(4), np.full(TANGENT_DIM, sigma))


def residual(edge: EdgeMeasurement, h_i: np.ndarray, h_j: np.ndarray) -> np.ndarray:
    """Whitened 15-vector residual of a single edge."""
    m = np.linalg.solve(edge.h_meas, np.linalg.solve(h_i, h_j))
    return sl4_log(m) / edge.sigma


@dataclass
class OptimizerConfig:
    max_iters: int = 100
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0
    lambda_max: float = 1e10
    tol_rel_cost: float = 1e-9
    tol_step: float = 1e-10
    fd_step: float = 1e-6
    jacobian: str = "fd"   # "fd" or "analytic"


@dataclass
class OptimizerReport:
    iterations: int
    accepted_steps: int
    initial_cost: float
    final_cost: float
    converged: bool
    lambda_final: float
    reason: str


class _Problem:
    """Precomputed index arrays for batched residual evaluation."""

    def __init__(self, graph: Graph):
        self.variables = graph.variables
        self.index = {v: k for k, v in enumerate(self.variables)}
        self.edges = graph.edges
        self.priors = graph.priors
        self.n_vars = len(self.variables)
        self.e_i = np.array([self.index[e.var_i] for e in self.edges], dtype=np.int64)
        self.e_j = np.array([self.index[e.var_j] for e in self.edges], dtype=np.int64)
        self.p_idx = np.array([self.index[p.var] for p in self.priors], dtype=np.int64)
        if self.edges:
            self.m_inv = np.linalg.inv(np.stack([e.h_meas for e in self.edges]))
            self.e_sigma = np.stack([e.sigma for e in self.edges])
        else:
            self.m_inv = np.zeros((0, 4, 4))
            self.e_sigma = np.zeros((0, TANGENT_DIM))
        if self.priors:
            self.prior_inv = np.linalg.inv(np.stack([p.h_prior for p in self.priors]))
            self.p_sigma = np.stack([p.sigma for p in self.priors])
        else:
            self.prior_inv = np.zeros((0, 4, 4))
            self.p_sigma = np.zeros((0, TANGENT_DIM))

    def stack_values(self, values: dict) -> np.ndarray:
        try:
            return np.stack([values[v] for v in self.variables])
        except KeyError as missing:
            raise DimensionMismatchError(f"values missing variable {missing}") from None

    def base_mats(self, hs: np.ndarray):
        h_inv = np.linalg.inv(hs)
        if len(self.edges):
            d = h_inv[self.e_i] @ hs[self.e_j]
            m0 = self.m_inv @ d
        else:
            d = np.zeros((0, 4, 4))
            m0 = d
        p0 = self.prior_inv @ hs[self.p_idx]
        return m0, d, p0

    def residuals(self, hs: np.ndarray):
        m0, _, p0 = self.base_mats(hs)
        logs = _batched_log(np.concatenate([m0, p0]))
        r_e = logs[: len(self.edges)] / self.e_sigma
        r_p = logs[len(self.edges):] / self.p_sigma
        return r_e, r_p

    def cost(self, hs: np.ndarray) -> float:
        r_e, r_p = self.residuals(hs)
        return float(np.sum(r_e**2) + np.sum(r_p**2))


def _batched_log(mats: np.ndarray) -> np.ndarray:
    logs, ok = kernels.logm44_many(mats)
    if not np.all(ok):
        bad = int(np.where(~ok)[0][0])
        raise LogDivergenceError(f"residual log diverged for factor block {bad}")
    back = kernels.expm44_many(logs)
    scale = np.maximum(np.sqrt(np.sum(mats * mats, axis=(1, 2))), 1.0)
    err = np.sqrt(np.sum((back - mats) ** 2, axis=(1, 2))) / scale
    if np.any(err > 1e-8):
        bad = int(np.argmax(err))
        raise LogDivergenceError(f"residual log left the principal branch at block {bad}")
    return tangent_coords(logs)


_FD_CACHE: dict[float, tuple[np.ndarray, np.ndarray]] = {}


def _fd_generators(step: float):
    cached = _FD_CACHE.get(step)
    if cached is None:
        plus = kernels.expm44_many(step * GENERATORS)
        minus = kernels.expm44_many(-step * GENERATORS)
        cached = (plus, minus)
        _FD_CACHE[step] = cached
    return cached


def _dexpinv(x_mat: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of exp at X, as a 15x15 coefficient matrix."""
    ad = sl4_ad(x_mat)
    out = np.eye(TANGENT_DIM) * _DEXPINV_COEFFS[0]
    power = np.eye(TANGENT_DIM)
    for n in range(1, 15):
        power = power @ ad
        coeff = _DEXPINV_COEFFS.get(n)
        if coeff:
            out = out + coeff * power
    return out


def linearize(graph: Graph, values: dict, fd_step: float = 1e-6,
              jacobian: str = "fd"):
    """Normal equations (H, g) and scalar cost at the current values.

    H is the Gauss-Newton approximation J^T J over all factors, g = J^T r,
    both in the sorted-variable dense ordering, 15 slots per variable.
    """
    problem = _Problem(graph)
    hs = problem.stack_values(values)
    return _linearize(problem, hs, fd_step, jacobian)


def _linearize(problem: _Problem, hs: np.ndarray, fd_step: float, jacobian: str):
    n_e = len(problem.edges)
    n_p = len(problem.priors)
    m0, d, p0 = problem.base_mats(hs)

    if jacobian == "fd":
        plus, minus = _fd_generators(fd_step)
        blocks = [m0, p0]
        if n_e:
            blocks.append((m0[:, None] @ plus[None]).reshape(-1, 4, 4))
            blocks.append((m0[:, None] @ minus[None]).reshape(-1, 4, 4))
            mi_plus = (problem.m_inv[:, None] @ minus[None]) @ d[:, None]
            mi_minus = (problem.m_inv[:, None] @ plus[None]) @ d[:, None]
            blocks.append(mi_plus.reshape(-1, 4, 4))
            blocks.append(mi_minus.reshape(-1, 4, 4))
        blocks.append((p0[:, None] @ plus[None]).reshape(-1, 4, 4))
        blocks.append((p0[:, None] @ minus[None]).reshape(-1, 4, 4))
        logs = _batched_log(np.concatenate(blocks))

        ofs = 0
        r0_e = logs[ofs:ofs + n_e]; ofs += n_e
        r0_p = logs[ofs:ofs + n_p]; ofs += n_p
        if n_e:
            jp = logs[ofs:ofs + 15 * n_e].reshape(n_e, 15, 15); ofs += 15 * n_e
            jm = logs[ofs:ofs + 15 * n_e].reshape(n_e, 15, 15); ofs += 15 * n_e
            j_j = (jp - jm).transpose(0, 2, 1) / (2.0 * fd_step)
            ip = logs[ofs:ofs + 15 * n_e].reshape(n_e, 15, 15); ofs += 15 * n_e
            im = logs[ofs:ofs + 15 * n_e].reshape(n_e, 15, 15); ofs += 15 * n_e
            j_i = (ip - im).transpose(0, 2, 1) / (2.0 * fd_step)
        else:
            j_j = np.zeros((0, 15, 15))
            j_i = np.zeros((0, 15, 15))
        pp = logs[ofs:ofs + 15 * n_p].reshape(n_p, 15, 15); ofs += 15 * n_p
        pm = logs[ofs:ofs + 15 * n_p].reshape(n_p, 15, 15)
        j_p = (pp - pm).transpose(0, 2, 1) / (2.0 * fd_step)
    elif jacobian == "analytic":
        logs = _batched_log(np.concatenate([m0, p0]))
        r0_e = logs[:n_e]
        r0_p = logs[n_e:]
        j_j = np.zeros((n_e, 15, 15))
        j_i = np.zeros((n_e, 15, 15))
        if n_e:
            d_inv = np.linalg.inv(d)
        for e in range(n_e):
            w = _dexpinv(tangent_matrix(r0_e[e]))
            j_j[e] = w
            j_i[e] = -w @ sl4_adjoint(d_inv[e])
        j_p = np.zeros((n_p, 15, 15))
        for p in range(n_p):
            j_p[p] = _dexpinv(tangent_matrix(r0_p[p]))
    else:
        raise DimensionMismatchError(f"unknown jacobian mode {jacobian!r}")

    r0_e = r0_e / problem.e_sigma
    r0_p = r0_p / problem.p_sigma
    j_j = j_j / problem.e_sigma[:, :, None]
    j_i = j_i / problem.e_sigma[:, :, None]
    j_p = j_p / problem.p_sigma[:, :, None]

    n = problem.n_vars * 15
    h_mat = np.zeros((n, n))
    g = np.zeros(n)
    for e in range(n_e):
        i0 = problem.e_i[e] * 15
        j0 = problem.e_j[e] * 15
        ji, jj, r = j_i[e], j_j[e], r0_e[e]
        h_mat[i0:i0 + 15, i0:i0 + 15] += ji.T @ ji
        h_mat[j0:j0 + 15, j0:j0 + 15] += jj.T @ jj
        cross = ji.T @ jj
        h_mat[i0:i0 + 15, j0:j0 + 15] += cross
        h_mat[j0:j0 + 15, i0:i0 + 15] += cross.T
        g[i0:i0 + 15] += ji.T @ r
        g[j0:j0 + 15] += jj.T @ r
    for p in range(n_p):
        i0 = problem.p_idx[p] * 15
        h_mat[i0:i0 + 15, i0:i0 + 15] += j_p[p].T @ j_p[p]
        g[i0:i0 + 15] += j_p[p].T @ r0_p[p]

    cost = float(np.sum(r0_e**2) + np.sum(r0_p**2))
    return h_mat, g, cost


def _retract(hs: np.ndarray, delta: np.ndarray) -> np.ndarray:
    steps = kernels.expm44_many(tangent_matrix(delta.reshape(-1, TANGENT_DIM)))
    trial = hs @ steps
    dets = np.linalg.det(trial)
    if np.any(~np.isfinite(dets)) or np.any(dets <= 0):
        raise LogDivergenceError("retraction left the positive-determinant region")
    return trial / dets[:, None, None] ** 0.25


def optimize_lm(graph: Graph, values: dict, config: OptimizerConfig | None = None):
    """Levenberg-Marquardt over all variables; returns (values, report).

    Damping is multiplicative on the Hessian diagonal, divided by 10 on
    accepted steps and multiplied by 10 on rejections.  Stops on relative
    cost decrease below tol_rel_cost, step norm below tol_step, or
    max_iters.  A graph without priors raises GaugeDeficientError; if every
    damped step diverges the initialization is unrecoverable and
    LogDivergenceError propagates.
    """
    config = config or OptimizerConfig()
    if not graph.priors:
        raise GaugeDeficientError("graph has no prior; the gauge is free")
    problem = _Problem(graph)
    hs = problem.stack_values(values)

    h_mat, g, cost = _linearize(problem, hs, config.fd_step, config.jacobian)
    initial_cost = cost
    lam = config.lambda_init
    iterations = 0
    accepted = 0
    converged = False
    reason = "max_iters"

    while iterations < config.max_iters:
        iterations += 1
        damped = h_mat + np.diag(lam * np.maximum(np.diag(h_mat), 1e-12))
        try:
            delta = np.linalg.solve(damped, -g)
        except np.linalg.LinAlgError:
            delta = None

        diverged = False
        trial_cost = np.inf
        if delta is not None:
            # a negligible solved step at low damping means the linear model
            # sees nothing left to gain; accept convergence without a cost
            # comparison, which would be at the mercy of rounding noise.  At
            # escalated damping small steps just mean lambda is huge, so the
            # stall is left to run into lambda_max instead.
            if (lam <= config.lambda_init
                    and float(np.linalg.norm(delta)) < config.tol_step):
                converged = True
                reason = "step_norm"
                break
            try:
                trial = _retract(hs, delta)
                trial_cost = problem.cost(trial)
            except LogDivergenceError:
                diverged = True

        if delta is not None and np.isfinite(trial_cost) and trial_cost < cost:
            step_norm = float(np.linalg.norm(delta))
            rel_decrease = (cost - trial_cost) / max(cost, 1e-300)
            hs = trial
            cost = trial_cost
            accepted += 1
            lam = max(lam / config.lambda_factor, 1e-12)
            if rel_decrease < config.tol_rel_cost:
                converged = True
                reason = "rel_cost"
                break
            if step_norm < config.tol_step:
                converged = True
                reason = "step_norm"
                break
            h_mat, g, cost = _linearize(problem, hs, config.fd_step, config.jacobian)
        else:
            lam = lam * config.lambda_factor
            if lam > config.lambda_max:
                if diverged:
                    raise LogDivergenceError(
                        "every damped step diverged; initialization is unrecoverable"
                    )
                reason = "lambda_max"
                break

    out = {v: hs[k] for k, v in enumerate(problem.variables)}
    report = OptimizerReport(
        iterations=iterations,
        accepted_steps=accepted,
        initial_cost=initial_cost,
        final_cost=cost,
        converged=converged,
        lambda_final=lam,
        reason=reason,
    )
    return out, report


def dump_graph(graph: Graph, path) -> None:
    """Plain-text dump, one line per factor: kind, ids, 16 matrix entries, 15 sigmas."""
    lines = []
    for p in graph.priors:
        fields = ["prior", f"{p.var[0]}:{p.var[1]}", "-"]
        fields += [f"{v:.17g}" for v in p.h_prior.ravel()]
        fields += [f"{v:.17g}" for v in p.sigma]
        lines.append(" ".join(fields))
    for e in graph.edges:
        fields = [e.kind, f"{e.var_i[0]}:{e.var_i[1]}", f"{e.var_j[0]}:{e.var_j[1]}"]
        fields += [f"{v:.17g}" for v in e.h_meas.ravel()]
        fields += [f"{v:.17g}" for v in e.sigma]
        lines.append(" ".join(fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
