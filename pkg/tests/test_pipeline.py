"""End-to-end and unit tests for the incremental alignment pipeline."""

import json
import os

import numpy as np
import pytest

from sl4slam import geometry
from sl4slam.dataset import DiskSubmapSource
from sl4slam.errors import (
    DimensionMismatchError,
    EmptyCorrespondencesError,
    OverlapViolationError,
)
from sl4slam.evaluation import Trajectory, ate_rmse, parse_tum, rotation_to_quat
from sl4slam.pipeline import (
    MAP_NAME,
    REPORT_NAME,
    TRAJECTORY_NAME,
    SlamConfig,
    SlamPipeline,
    disparity_gate,
    projected_pixel_pairs,
    reconstruction_trajectory,
    recover_reconstruction,
    run_slam,
)
from sl4slam.simulator import (
    NOISE_PROFILES,
    NoiseSpec,
    SimulatorSource,
    generate_dataset,
    preset_corridor,
    preset_loop,
    preset_planar_wall,
)
from sl4slam.submap import REGULAR, Keyframe, Submap, back_project


def make_k(fx=50.0, fy=50.0, cx=31.5, cy=23.5):
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def make_keyframe(frame_id, pose=None, k=None, depth=None, h=24, w=32):
    pose = np.eye(4) if pose is None else pose
    k = make_k() if k is None else k
    depth = np.full((h, w), 2.0) if depth is None else depth
    return Keyframe(frame_id, frame_id * 0.1, pose, k, depth, np.ones_like(depth))


def gt_trajectory(source):
    ts, positions, rotations = source.groundtruth()
    quats = np.array([rotation_to_quat(r) for r in rotations])
    return Trajectory(np.asarray(ts, dtype=np.float64), positions, quats)


def slam_ate(plan, noise, seed, config):
    source = SimulatorSource(plan, noise, seed)
    rec, report = run_slam(source, config)
    result = ate_rmse(reconstruction_trajectory(rec), gt_trajectory(source))
    return result.rmse, report


# disparity gate --------------------------------------------------------------


def test_disparity_gate_zero_motion_rejected():
    pix = np.tile([10.0, 20.0], (40, 1))
    assert disparity_gate(pix, pix, 50.0) is False


def test_disparity_gate_uniform_shift():
    rng = np.random.default_rng(3)
    pix_a = rng.uniform(0.0, 64.0, size=(30, 2))
    # every correspondence moves exactly 60 px along x
    pix_b = pix_a + np.array([60.0, 0.0])
    assert disparity_gate(pix_a, pix_b, 50.0) is True
    assert disparity_gate(pix_a, pix_b, 60.0) is True
    assert disparity_gate(pix_a, pix_b, 60.0 + 1e-9) is False


def test_disparity_gate_uses_mean():
    # half the pixels still, half moved 120 px: mean displacement is 60
    pix_a = np.zeros((10, 2))
    pix_b = np.zeros((10, 2))
    pix_b[5:, 0] = 120.0
    assert disparity_gate(pix_a, pix_b, 50.0) is True
    assert disparity_gate(pix_a, pix_b, 61.0) is False


def test_disparity_gate_validates_input():
    with pytest.raises(EmptyCorrespondencesError):
        disparity_gate(np.zeros((0, 2)), np.zeros((0, 2)), 50.0)
    with pytest.raises(DimensionMismatchError):
        disparity_gate(np.zeros((4, 2)), np.zeros((5, 2)), 50.0)


def test_projected_pixels_same_view_have_zero_disparity():
    kf = make_keyframe(0)
    pix_a, pix_b = projected_pixel_pairs(kf, kf)
    assert pix_a.shape == pix_b.shape
    assert pix_a.shape[0] > 0
    assert np.allclose(pix_a, pix_b, atol=1e-9)


# ingestion mechanics ---------------------------------------------------------


def zero_noise_source(preset=preset_loop, submaps=4, submap_size=8, seed=3):
    return SimulatorSource(preset(submaps=submaps, submap_size=submap_size),
                           NoiseSpec(), seed)


def test_first_submap_builds_anchored_chain():
    source = zero_noise_source()
    pipe = SlamPipeline(SlamConfig(enable_loop_closures=False), source=source)
    submap = next(source.regular_submaps())
    pipe.ingest_submap(submap)
    assert len(pipe.graph.variables) == len(submap.keyframes)
    assert len(pipe.graph.priors) == 1
    assert pipe.edge_counts() == {"intra": len(submap.keyframes) - 1}
    # the chain is initialized at the first reported pose (identity) and
    # optimization of a consistent chain leaves the anchor in place
    first = pipe.graph.variables[0]
    assert np.allclose(pipe.values[first], np.eye(4), atol=1e-9)


def test_skipping_a_submap_violates_overlap():
    source = zero_noise_source()
    submaps = list(source.regular_submaps())
    pipe = SlamPipeline(SlamConfig(enable_loop_closures=False), source=source)
    pipe.ingest_submap(submaps[0])
    with pytest.raises(OverlapViolationError):
        pipe.ingest_submap(submaps[2])


def test_reingesting_same_submap_rejected():
    source = zero_noise_source()
    submaps = list(source.regular_submaps())
    pipe = SlamPipeline(SlamConfig(enable_loop_closures=False), source=source)
    pipe.ingest_submap(submaps[0])
    with pytest.raises(OverlapViolationError):
        pipe.ingest_submap(submaps[0])


def test_insufficient_overlap_points_drops_edge():
    source = zero_noise_source()
    config = SlamConfig(enable_loop_closures=False, min_inter_points=10**6)
    pipe = SlamPipeline(config, source=source)
    for submap in source.regular_submaps():
        pipe.ingest_submap(submap)
    assert "inter" not in pipe.edge_counts()
    assert any("dropped" in w for w in pipe.warnings)


# accuracy on simulated data --------------------------------------------------


def test_zero_noise_recovers_trajectory_exactly():
    plan = preset_loop(submaps=4, submap_size=8)
    ate, report = slam_ate(plan, NoiseSpec(), 3, SlamConfig())
    assert ate <= 1e-6
    assert report["final_cost"] <= 1e-12
    assert all(o["converged"] for o in report["optimizations"])


def test_zero_noise_overlap_points_coincide():
    source = zero_noise_source()
    pipe = SlamPipeline(SlamConfig(), source=source)
    submaps = list(source.regular_submaps())
    for submap in submaps:
        pipe.ingest_submap(submap)
    # the shared frame between submaps 0 and 1 is mapped into the world by
    # two different variables; with exact measurements both placements of
    # its point cloud must agree
    shared = submaps[0].keyframes[-1]
    assert shared.frame_id == submaps[1].keyframes[0].frame_id
    pts = back_project(shared.k, shared.depth).reshape(3, -1).T
    placed_a = geometry.sl4_act(pipe.values[(0, shared.frame_id)], pts)
    placed_b = geometry.sl4_act(pipe.values[(1, shared.frame_id)], pts)
    gaps = np.linalg.norm(placed_a - placed_b, axis=1)
    assert np.median(gaps) <= 1e-6


def test_loop_closures_and_inter_edges_reduce_drift():
    plan = preset_loop(submaps=6, submap_size=8)
    noise = NOISE_PROFILES["inmodel"]
    ate_id_open, rep_id_open = slam_ate(
        plan, noise, 7,
        SlamConfig(inter_edge_mode="identity", enable_loop_closures=False))
    ate_id_loop, rep_id_loop = slam_ate(
        plan, noise, 7, SlamConfig(inter_edge_mode="identity"))
    ate_full_open, _ = slam_ate(
        plan, noise, 7, SlamConfig(enable_loop_closures=False))
    ate_full_loop, rep_full = slam_ate(plan, noise, 7, SlamConfig())

    assert rep_id_open["closures"]["accepted"] == 0
    assert rep_id_loop["closures"]["accepted"] > 0
    assert rep_full["closures"]["accepted"] > 0
    # closures fix drift the identity edges cannot, calibrated inter edges
    # fix most of the rest, and the combination is best
    assert ate_id_loop < ate_id_open
    assert ate_full_open < ate_id_loop
    assert ate_full_loop < ate_full_open
    assert ate_id_open / ate_full_loop > 5.0


def test_point_align_flags_planar_scene():
    plan = preset_planar_wall(submaps=3, submap_size=8)
    source = SimulatorSource(plan, NOISE_PROFILES["inmodel"], 5)
    _, report = run_slam(source, SlamConfig(inter_edge_mode="point_align"))
    degenerate = [w for w in report["warnings"] if "degenerate" in w]
    assert len(degenerate) == source.submap_count - 1


def test_point_align_accepts_cluttered_scene():
    plan = preset_corridor(submaps=3, submap_size=8)
    source = SimulatorSource(plan, NOISE_PROFILES["inmodel"], 5)
    _, report = run_slam(source, SlamConfig(inter_edge_mode="point_align"))
    assert not any("degenerate" in w for w in report["warnings"])
    assert report["edges"]["inter"] == source.submap_count - 1
    assert all(o["converged"] for o in report["optimizations"])


def test_full_mode_beats_point_align_on_planar_scene():
    plan = preset_planar_wall(submaps=3, submap_size=8)
    noise = NOISE_PROFILES["inmodel"]
    ate_full, _ = slam_ate(plan, noise, 5, SlamConfig())
    ate_ablation, _ = slam_ate(
        plan, noise, 5, SlamConfig(inter_edge_mode="point_align"))
    assert ate_full < ate_ablation


# closures and report ---------------------------------------------------------


def test_closure_records_are_unique_and_complete():
    plan = preset_loop(submaps=6, submap_size=8)
    source = SimulatorSource(plan, NOISE_PROFILES["inmodel"], 7)
    _, report = run_slam(source, SlamConfig())
    details = report["closures"]["details"]
    assert report["closures"]["found"] == len(details)
    assert report["closures"]["accepted"] + report["closures"]["rejected"] \
        == len(details)
    pairs = [(d["query_frame_id"], d["retrieved_frame_id"]) for d in details]
    assert len(pairs) == len(set(pairs))
    for d in details:
        assert d["retrieval_similarity"] >= 0.95
        if d["accepted"]:
            assert d["match_score"] >= 0.85
            assert d["loop_submap_id"] is not None
            assert d["mean_disparity_px"] is not None
            assert isinstance(d["disparity_gate"], bool)


def test_loop_edges_follow_accepted_closures():
    plan = preset_loop(submaps=6, submap_size=8)
    source = SimulatorSource(plan, NOISE_PROFILES["inmodel"], 7)
    pipe = SlamPipeline(SlamConfig(), source=source)
    for submap in source.regular_submaps():
        pipe.ingest_submap(submap)
    accepted = sum(1 for c in pipe.closures if c.accepted)
    counts = pipe.edge_counts()
    assert accepted > 0
    assert counts["loop_intra"] == accepted
    assert counts["loop_inter"] == 2 * accepted


def test_disabling_closures_skips_retrieval():
    plan = preset_loop(submaps=6, submap_size=8)
    source = SimulatorSource(plan, NOISE_PROFILES["inmodel"], 7)
    _, report = run_slam(source, SlamConfig(enable_loop_closures=False))
    assert report["closures"]["found"] == 0
    assert "loop_intra" not in report["edges"]


def test_report_structure_and_config_echo():
    source = zero_noise_source()
    config = SlamConfig(retrieval_stride=2, enable_loop_closures=False)
    _, report = run_slam(source, config)
    for key in ("config", "variables", "edges", "closures", "optimizations",
                "final_cost", "warnings", "timings"):
        assert key in report
    assert report["config"]["retrieval_stride"] == 2
    assert report["config"]["submap_size"] == 16
    # 4 submaps of 8 frames sharing 1 frame with the previous: one variable
    # per submap/frame incidence
    assert report["variables"] == len(
        {(sid, fid) for sid in range(4) for fid in range(sid * 7, sid * 7 + 8)})
    for entry in report["optimizations"]:
        assert set(entry) >= {"submap_id", "iterations", "accepted_steps",
                              "initial_cost", "final_cost", "converged",
                              "reason", "seconds"}


def test_config_validation():
    with pytest.raises(DimensionMismatchError):
        SlamConfig(submap_size=1)
    with pytest.raises(DimensionMismatchError):
        SlamConfig(retrieval_threshold=3.0)
    with pytest.raises(DimensionMismatchError):
        SlamConfig(inter_edge_mode="bogus")
    with pytest.raises(DimensionMismatchError):
        SlamConfig(retrieval_stride=0)


# geometry recovery -----------------------------------------------------------


def test_recover_reconstruction_identity_variable():
    kf = make_keyframe(0)
    submap = Submap(submap_id=0, kind=REGULAR,
                    keyframes=[kf, make_keyframe(1)])
    values = {(0, 0): np.eye(4), (0, 1): np.eye(4)}
    rec = recover_reconstruction(values, [submap])
    assert rec.frame_ids == [0, 1]
    assert np.allclose(rec.poses[0], np.eye(4), atol=1e-9)
    assert np.allclose(rec.intrinsics[0], kf.k / kf.k[2, 2], atol=1e-9)
    assert rec.skipped == []


def test_recover_reconstruction_rigid_variable():
    pose = np.eye(4)
    pose[:3, :3] = geometry.rotvec_to_matrix(np.array([0.1, -0.2, 0.05]))
    pose[:3, 3] = [0.4, -0.1, 0.8]
    kf = make_keyframe(3, pose=pose)
    submap = Submap(submap_id=0, kind=REGULAR,
                    keyframes=[make_keyframe(2), kf])
    values = {(0, 2): np.eye(4), (0, 3): geometry.se3_to_sl4(pose)}
    rec = recover_reconstruction(values, [submap])
    assert np.allclose(rec.poses[3], pose, atol=1e-9)
    assert np.allclose(rec.intrinsics[3], kf.k / kf.k[2, 2], atol=1e-9)
    # the world cloud contains the identity frame's back-projection as-is
    pts = back_project(kf.k, kf.depth).reshape(3, -1).T
    own = rec.point_frames == 3
    assert np.allclose(rec.points[own], geometry.sl4_act(
        geometry.se3_to_sl4(pose), pts), atol=1e-9)


def test_earliest_submap_provides_canonical_pose():
    sub_a = Submap(submap_id=0, kind=REGULAR,
                   keyframes=[make_keyframe(4), make_keyframe(5)])
    sub_b = Submap(submap_id=1, kind=REGULAR,
                   keyframes=[make_keyframe(5), make_keyframe(6)])
    shift = np.eye(4)
    shift[:3, 3] = [1.0, 0.0, 0.0]
    lifted = geometry.se3_to_sl4(shift)
    values = {(0, 4): np.eye(4), (0, 5): np.eye(4),
              (1, 5): lifted, (1, 6): lifted}
    # submap order in the argument does not matter; the earlier submap id
    # wins the canonical pose for the shared frame
    rec = recover_reconstruction(values, [sub_b, sub_a])
    assert np.allclose(rec.poses[5], np.eye(4), atol=1e-12)
    assert np.allclose(rec.poses[6], shift, atol=1e-12)


# artifacts and determinism ---------------------------------------------------


def test_run_slam_writes_artifacts(tmp_path):
    source = zero_noise_source()
    out = tmp_path / "out"
    rec, report = run_slam(source, SlamConfig(), out_dir=str(out))
    for name in (TRAJECTORY_NAME, MAP_NAME, REPORT_NAME):
        assert (out / name).exists()
    traj = parse_tum(str(out / TRAJECTORY_NAME))
    assert len(traj.times) == len(rec.frame_ids)
    with open(out / REPORT_NAME) as fh:
        on_disk = json.load(fh)
    assert on_disk["variables"] == report["variables"]
    assert on_disk["frames"] == len(rec.frame_ids)
    assert on_disk["points"] == rec.points.shape[0]


def test_disk_dataset_runs_are_bitwise_deterministic(tmp_path):
    plan_dir = tmp_path / "dataset"
    generate_dataset("loop", NOISE_PROFILES["inmodel"], 11, str(plan_dir),
                     submaps=4, submap_size=8)
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        source = DiskSubmapSource(str(plan_dir))
        run_slam(source, SlamConfig(), out_dir=str(out))
        outputs.append({
            name: (out / name).read_bytes()
            for name in (TRAJECTORY_NAME, MAP_NAME)})
    assert outputs[0][TRAJECTORY_NAME] == outputs[1][TRAJECTORY_NAME]
    assert outputs[0][MAP_NAME] == outputs[1][MAP_NAME]


def test_disk_and_memory_sources_agree(tmp_path):
    plan_dir = tmp_path / "dataset"
    generate_dataset("loop", NoiseSpec(), 3, str(plan_dir),
                     submaps=4, submap_size=8)
    disk_rec, _ = run_slam(DiskSubmapSource(str(plan_dir)), SlamConfig())
    mem_rec, _ = run_slam(zero_noise_source(), SlamConfig())
    assert disk_rec.frame_ids == mem_rec.frame_ids
    for fid in disk_rec.frame_ids:
        assert np.allclose(disk_rec.poses[fid], mem_rec.poses[fid], atol=1e-9)
