"""Factor graph construction, linearization, and optimizer behavior."""

import numpy as np
import pytest

from sl4slam.alignment import EdgeMeasurement
from sl4slam.errors import (
    DimensionMismatchError,
    GaugeDeficientError,
    LogDivergenceError,
)
from sl4slam.factor_graph import (
    Graph,
    OptimizerConfig,
    anchor_first,
    dump_graph,
    linearize,
    optimize_lm,
    residual,
)
from sl4slam.geometry import (
    rotvec_to_matrix,
    se3_to_sl4,
    sl4_adjoint,
    sl4_exp,
    sl4_inverse,
    sl4_log,
    sl4_normalize,
)

rng = np.random.default_rng(41)

SIGMA = np.full(15, 1e-2)


def random_se3(rand, rot_scale=0.5, trans_scale=1.0):
    t = np.eye(4)
    t[:3, :3] = rotvec_to_matrix(rot_scale * rand.standard_normal(3))
    t[:3, 3] = trans_scale * rand.standard_normal(3)
    return se3_to_sl4(t)


def random_sl4(rand, scale=0.2):
    return sl4_exp(scale * rand.standard_normal(15))


def relative(h_i, h_j):
    return sl4_normalize(np.linalg.solve(h_i, h_j))


def chain_graph(truth, sigma=SIGMA):
    graph = Graph()
    for var in truth:
        graph.add_variable(var)
    keys = sorted(truth)
    for a, b in zip(keys[:-1], keys[1:]):
        graph.add_edge(EdgeMeasurement(a, b, relative(truth[a], truth[b]), sigma, "intra"))
    return graph


class TestGraphStructure:
    def test_duplicate_variable_rejected(self):
        graph = Graph()
        graph.add_variable((0, 0))
        with pytest.raises(DimensionMismatchError):
            graph.add_variable((0, 0))

    def test_edge_requires_known_variables(self):
        graph = Graph()
        graph.add_variable((0, 0))
        edge = EdgeMeasurement((0, 0), (0, 1), np.eye(4), SIGMA, "intra")
        with pytest.raises(DimensionMismatchError):
            graph.add_edge(edge)

    def test_self_edge_rejected(self):
        graph = Graph()
        graph.add_variable((0, 0))
        graph.add_variable((0, 1))
        edge = EdgeMeasurement((0, 0), (0, 0), np.eye(4), SIGMA, "intra")
        with pytest.raises(DimensionMismatchError):
            graph.add_edge(edge)

    def test_variables_sorted(self):
        graph = Graph()
        for var in [(2, 0), (0, 1), (0, 0), (1, 5)]:
            graph.add_variable(var)
        assert graph.variables == [(0, 0), (0, 1), (1, 5), (2, 0)]
        assert graph.insertion_order() == [(2, 0), (0, 1), (0, 0), (1, 5)]

    def test_anchor_first_idempotent(self):
        graph = Graph()
        graph.add_variable((0, 1))
        graph.add_variable((0, 0))
        assert anchor_first(graph)
        assert not anchor_first(graph)
        assert len(graph.priors) == 1
        assert graph.priors[0].var == (0, 0)
        assert np.allclose(graph.priors[0].h_prior, np.eye(4))

    def test_distinct_priors_both_kept(self):
        graph = Graph()
        graph.add_variable((0, 0))
        assert graph.add_prior((0, 0), np.eye(4), np.full(15, 1e-6))
        assert graph.add_prior((0, 0), np.eye(4), np.full(15, 1e-3))
        assert len(graph.priors) == 2

    def test_prior_unknown_variable(self):
        graph = Graph()
        with pytest.raises(DimensionMismatchError):
            graph.add_prior((3, 3), np.eye(4), np.full(15, 1e-6))


class TestResidual:
    def test_exact_measurement_zero_residual(self):
        h_i = random_sl4(rng)
        h_j = random_sl4(rng)
        edge = EdgeMeasurement((0, 0), (0, 1), relative(h_i, h_j), SIGMA, "intra")
        assert np.max(np.abs(residual(edge, h_i, h_j))) < 1e-9

    def test_j_perturbation_is_exact_tangent(self):
        # With a zero-residual edge, r(h_i, h_j exp(d)) = d / sigma exactly:
        # the log argument collapses to exp(d) itself.
        rand = np.random.default_rng(7)
        h_i = random_sl4(rand)
        h_j = random_sl4(rand)
        edge = EdgeMeasurement((0, 0), (0, 1), relative(h_i, h_j), SIGMA, "intra")
        delta = 1e-3 * rand.standard_normal(15)
        h_j_pert = h_j @ sl4_exp(delta)
        r = residual(edge, h_i, h_j_pert)
        assert np.allclose(r, delta / SIGMA, atol=1e-9)

    def test_i_perturbation_is_adjoint_mapped(self):
        # r(h_i exp(d), h_j) = -Ad(D^-1) d / sigma exactly, D = h_i^-1 h_j.
        rand = np.random.default_rng(11)
        h_i = random_sl4(rand)
        h_j = random_sl4(rand)
        edge = EdgeMeasurement((0, 0), (0, 1), relative(h_i, h_j), SIGMA, "intra")
        delta = 1e-3 * rand.standard_normal(15)
        r = residual(edge, h_i @ sl4_exp(delta), h_j)
        d_rel = sl4_normalize(np.linalg.solve(h_i, h_j))
        expected = -(sl4_adjoint(sl4_inverse(d_rel)) @ delta) / SIGMA
        assert np.allclose(r, expected, atol=1e-8)


class TestLinearize:
    def test_zero_gradient_at_optimum(self):
        rand = np.random.default_rng(13)
        truth = {(0, k): np.eye(4) if k == 0 else random_sl4(rand) for k in range(4)}
        graph = chain_graph(truth)
        anchor_first(graph)
        h_mat, g, cost = linearize(graph, truth)
        assert cost < 1e-12
        assert np.max(np.abs(g)) < 1e-4
        assert h_mat.shape == (60, 60)
        assert np.allclose(h_mat, h_mat.T, atol=1e-6)

    def test_fd_matches_analytic_se3(self):
        rand = np.random.default_rng(17)
        truth = {(0, k): np.eye(4) if k == 0 else random_se3(rand) for k in range(5)}
        graph = chain_graph(truth)
        # extra loop edge plus measurement noise so residuals are nonzero
        noise = sl4_exp(0.05 * rand.standard_normal(15))
        graph.add_edge(EdgeMeasurement(
            (0, 0), (0, 4),
            sl4_normalize(relative(truth[(0, 0)], truth[(0, 4)]) @ noise),
            SIGMA, "inter"))
        anchor_first(graph)
        values = {v: sl4_normalize(m @ sl4_exp(0.02 * rand.standard_normal(15)))
                  for v, m in truth.items()}
        h_fd, g_fd, c_fd = linearize(graph, values, jacobian="fd")
        h_an, g_an, c_an = linearize(graph, values, jacobian="analytic")
        assert c_fd == pytest.approx(c_an, rel=1e-12)
        scale = np.max(np.abs(g_fd))
        assert np.max(np.abs(g_fd - g_an)) < 1e-5 * scale
        assert np.max(np.abs(h_fd - h_an)) < 1e-5 * np.max(np.abs(h_fd))

    def test_unanchored_hessian_has_gauge_nullspace(self):
        rand = np.random.default_rng(19)
        truth = {(0, k): np.eye(4) if k == 0 else random_sl4(rand) for k in range(3)}
        graph = chain_graph(truth)
        h_mat, _, _ = linearize(graph, truth)
        eigvals = np.linalg.eigvalsh(h_mat)
        null_dim = int(np.sum(eigvals < 1e-6 * eigvals[-1]))
        assert null_dim == 15

    def test_unknown_jacobian_mode(self):
        graph = Graph()
        graph.add_variable((0, 0))
        graph.add_prior((0, 0), np.eye(4), np.full(15, 1e-6))
        with pytest.raises(DimensionMismatchError):
            linearize(graph, {(0, 0): np.eye(4)}, jacobian="magic")

    def test_missing_value_detected(self):
        graph = Graph()
        graph.add_variable((0, 0))
        graph.add_variable((0, 1))
        anchor_first(graph)
        with pytest.raises(DimensionMismatchError):
            linearize(graph, {(0, 0): np.eye(4)})


class TestOptimize:
    def test_noiseless_chain_recovery(self):
        rand = np.random.default_rng(23)
        truth = {(0, k): np.eye(4) if k == 0 else random_sl4(rand) for k in range(8)}
        graph = chain_graph(truth)
        anchor_first(graph)
        values = {v: sl4_normalize(m @ sl4_exp(0.05 * rand.standard_normal(15)))
                  for v, m in truth.items()}
        solution, report = optimize_lm(graph, values)
        assert report.converged
        assert report.final_cost < 1e-14
        for var, h_true in truth.items():
            assert np.max(np.abs(solution[var] - h_true)) < 1e-6

    def test_noiseless_chain_recovery_analytic(self):
        rand = np.random.default_rng(29)
        truth = {(0, k): np.eye(4) if k == 0 else random_se3(rand) for k in range(6)}
        graph = chain_graph(truth)
        anchor_first(graph)
        values = {v: sl4_normalize(m @ sl4_exp(0.05 * rand.standard_normal(15)))
                  for v, m in truth.items()}
        solution, report = optimize_lm(
            graph, values, OptimizerConfig(jacobian="analytic"))
        assert report.converged
        for var, h_true in truth.items():
            assert np.max(np.abs(solution[var] - h_true)) < 1e-6

    def test_gauge_deficient_raises(self):
        rand = np.random.default_rng(31)
        truth = {(0, k): np.eye(4) if k == 0 else random_sl4(rand) for k in range(3)}
        graph = chain_graph(truth)
        with pytest.raises(GaugeDeficientError):
            optimize_lm(graph, truth)

    def test_sigma_rescale_leaves_solution_unchanged(self):
        # Multiplying every sigma (edges and prior) by one constant scales the
        # whole cost by c^-2 and must not move the optimum.
        rand = np.random.default_rng(37)
        truth = {(0, k): np.eye(4) if k == 0 else random_sl4(rand) for k in range(5)}
        factor = 7.3
        solutions = []
        for c in (1.0, factor):
            graph = Graph()
            for var in truth:
                graph.add_variable(var)
            keys = sorted(truth)
            noise_rand = np.random.default_rng(99)
            for a, b in zip(keys[:-1], keys[1:]):
                noisy = sl4_normalize(
                    relative(truth[a], truth[b])
                    @ sl4_exp(0.02 * noise_rand.standard_normal(15)))
                graph.add_edge(EdgeMeasurement(a, b, noisy, c * SIGMA, "intra"))
            graph.add_edge(EdgeMeasurement(
                keys[0], keys[-1],
                sl4_normalize(relative(truth[keys[0]], truth[keys[-1]])
                              @ sl4_exp(0.02 * noise_rand.standard_normal(15))),
                c * SIGMA, "inter"))
            graph.add_prior(keys[0], np.eye(4), np.full(15, c * 1e-6))
            init_rand = np.random.default_rng(55)
            values = {v: sl4_normalize(m @ sl4_exp(0.03 * init_rand.standard_normal(15)))
                      for v, m in truth.items()}
            solution, report = optimize_lm(graph, values)
            assert report.accepted_steps > 0
            solutions.append(solution)
        for var in truth:
            assert np.max(np.abs(solutions[0][var] - solutions[1][var])) < 1e-8

    def test_iteration_cap_reported(self):
        rand = np.random.default_rng(43)
        truth = {(0, k): np.eye(4) if k == 0 else random_sl4(rand) for k in range(6)}
        graph = chain_graph(truth)
        anchor_first(graph)
        values = {v: sl4_normalize(m @ sl4_exp(0.2 * rand.standard_normal(15)))
                  for v, m in truth.items()}
        solution, report = optimize_lm(graph, values, OptimizerConfig(max_iters=1))
        assert not report.converged
        assert report.reason == "max_iters"
        assert report.iterations == 1
        assert report.final_cost <= report.initial_cost

    def test_log_divergence_at_init_propagates(self):
        graph = Graph()
        graph.add_variable((0, 0))
        graph.add_variable((0, 1))
        anchor_first(graph)
        graph.add_edge(EdgeMeasurement((0, 0), (0, 1), np.eye(4), SIGMA, "intra"))
        flip = np.diag([-1.0, -1.0, 1.0, 1.0])   # pi rotation, log branch cut
        values = {(0, 0): np.eye(4), (0, 1): flip}
        with pytest.raises(LogDivergenceError):
            optimize_lm(graph, values)

    def test_solution_determinants_are_one(self):
        rand = np.random.default_rng(47)
        truth = {(0, k): np.eye(4) if k == 0 else random_sl4(rand) for k in range(4)}
        graph = chain_graph(truth)
        anchor_first(graph)
        values = {v: sl4_normalize(m @ sl4_exp(0.05 * rand.standard_normal(15)))
                  for v, m in truth.items()}
        solution, _ = optimize_lm(graph, values)
        for h in solution.values():
            assert np.linalg.det(h) == pytest.approx(1.0, abs=1e-10)


class TestDump:
    def test_dump_round_trip_values(self, tmp_path):
        rand = np.random.default_rng(53)
        truth = {(0, 0): np.eye(4), (0, 1): random_sl4(rand)}
        graph = chain_graph(truth)
        anchor_first(graph)
        path = tmp_path / "graph.txt"
        dump_graph(graph, path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 2
        kinds = {line.split()[0] for line in lines}
        assert kinds == {"prior", "intra"}
        edge_line = next(line for line in lines if line.startswith("intra"))
        fields = edge_line.split()
        assert fields[1] == "0:0" and fields[2] == "0:1"
        mat = np.array([float(v) for v in fields[3:19]]).reshape(4, 4)
        assert np.allclose(mat, graph.edges[0].h_meas, atol=1e-15)
        sig = np.array([float(v) for v in fields[19:34]])
        assert np.allclose(sig, SIGMA)
