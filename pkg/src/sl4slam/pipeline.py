"""Incremental homography-graph SLAM over a stream of submaps.

The driver consumes regular submaps in order, chains them into a factor
graph (rigid intra edges plus a calibration/scale inter edge at each
overlap), retrieves and verifies loop closures against a descriptor
database, optimizes after each submap, and finally recovers globally
consistent camera poses and a world point cloud from the per-incidence
homography variables.

Variable convention: one SL(4) variable per (submap_id, frame_id)
incidence, valued world-from-camera.  The frame shared by two consecutive
submaps therefore appears twice, tied together by its inter edge; the
earlier submap's copy is the canonical one used for output poses.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .alignment import (
    DEFAULT_MIN_POINTS,
    INTER,
    LOOP_INTER,
    LOOP_INTRA,
    SIGMA_INTER,
    SIGMA_INTRA,
    EdgeMeasurement,
    VarId,
    estimate_h_15dof,
    identity_inter_edge,
    inter_edge,
    intra_edges,
)
from .errors import (
    DimensionMismatchError,
    EmptyCorrespondencesError,
    FormatError,
    InsufficientPointsError,
    LogDivergenceError,
    OverlapViolationError,
    PointAtInfinityError,
    SingularProjectionError,
)
from .evaluation import Trajectory, rotation_to_quat, write_tum
from .factor_graph import (
    SIGMA_ANCHOR,
    Graph,
    OptimizerConfig,
    anchor_first,
    optimize_lm,
)
from .geometry import (
    rq_decompose_projection,
    se3_to_sl4,
    sl4_act,
    sl4_log,
    sl4_normalize,
)
from .ply import write_ply
from .retrieval import (
    MATCH_THRESHOLD,
    RETRIEVAL_THRESHOLD,
    DescriptorDB,
    TokenSet,
    query_place,
    verify_pair,
)
from .submap import (
    LOOP_CLOSURE,
    REGULAR,
    Keyframe,
    Submap,
    back_project,
    confidence_mask,
)

INTER_EDGE_MODES = ("full", "identity", "point_align")

TRAJECTORY_NAME = "trajectory.tum"
MAP_NAME = "map.ply"
REPORT_NAME = "report.json"


@dataclass
class SlamConfig:
    """Pipeline settings; defaults match the reference operating point."""

    submap_size: int = 16
    retrieval_threshold: float = RETRIEVAL_THRESHOLD
    match_threshold: float = MATCH_THRESHOLD
    conf_percentile: float = 0.25
    min_disparity_px: float = 50.0
    sigma_intra: float = SIGMA_INTRA
    sigma_inter: float = SIGMA_INTER
    sigma_anchor: float = SIGMA_ANCHOR
    min_inter_points: int = DEFAULT_MIN_POINTS
    optimize_every_submap: bool = True
    enable_loop_closures: bool = True
    retrieval_stride: int = 1
    inter_edge_mode: str = "full"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.submap_size < 2:
            raise DimensionMismatchError("submap_size must be at least 2")
        for name in ("retrieval_threshold", "match_threshold"):
            value = getattr(self, name)
            if not 0.0 < value <= 2.0:
                raise DimensionMismatchError(f"{name} out of range: {value}")
        if not 0.0 <= self.conf_percentile < 1.0:
            raise DimensionMismatchError(
                f"conf_percentile must be in [0, 1), got {self.conf_percentile}")
        if self.min_disparity_px < 0:
            raise DimensionMismatchError("min_disparity_px must be >= 0")
        if self.retrieval_stride < 1:
            raise DimensionMismatchError("retrieval_stride must be >= 1")
        if self.inter_edge_mode not in INTER_EDGE_MODES:
            raise DimensionMismatchError(
                f"inter_edge_mode must be one of {INTER_EDGE_MODES}, "
                f"got {self.inter_edge_mode!r}")
        for name in ("sigma_intra", "sigma_inter", "sigma_anchor"):
            if getattr(self, name) <= 0:
                raise DimensionMismatchError(f"{name} must be positive")

    def to_dict(self) -> dict:
        out = {
            k: v for k, v in self.__dict__.items() if k != "optimizer"
        }
        out["optimizer"] = dict(self.optimizer.__dict__)
        return out


def disparity_gate(pixels_a: np.ndarray, pixels_b: np.ndarray,
                   threshold_px: float) -> bool:
    """True when the mean pixel displacement reaches the threshold.

    ``pixels_a`` and ``pixels_b`` are matching (n, 2) pixel coordinates of
    the same scene points in two images.
    """
    pixels_a = np.asarray(pixels_a, dtype=np.float64).reshape(-1, 2)
    pixels_b = np.asarray(pixels_b, dtype=np.float64).reshape(-1, 2)
    if pixels_a.shape != pixels_b.shape:
        raise DimensionMismatchError(
            f"pixel arrays must match, got {pixels_a.shape} vs {pixels_b.shape}")
    if pixels_a.shape[0] == 0:
        raise EmptyCorrespondencesError("no correspondences to gate on")
    displacement = np.linalg.norm(pixels_a - pixels_b, axis=1)
    return bool(displacement.mean() >= threshold_px)


def projected_pixel_pairs(kf_a: Keyframe, kf_b: Keyframe,
                          conf_percentile: float = 0.25):
    """Pixel correspondences between two keyframes of one submap.

    Back-projects kf_a's confident pixels and reprojects them into kf_b
    using the submap-frame poses.  Returns (pixels_a, pixels_b), each
    (n, 2); points behind kf_b's camera are dropped.
    """
    h, w = kf_a.depth.shape
    points_a = back_project(kf_a.k, kf_a.depth).reshape(3, -1)
    u, v = np.meshgrid(np.arange(w, dtype=np.float64),
                       np.arange(h, dtype=np.float64))
    pixels_a = np.stack([u.ravel(), v.ravel()], axis=1)
    keep = confidence_mask(kf_a.conf, conf_percentile).ravel()
    keep &= kf_a.depth.ravel() > 1e-9
    points_a = points_a[:, keep]
    pixels_a = pixels_a[keep]

    rel = np.linalg.solve(kf_b.pose, kf_a.pose)
    points_b = rel[:3, :3] @ points_a + rel[:3, 3:4]
    in_front = points_b[2] > 1e-9
    points_b = points_b[:, in_front]
    pixels_a = pixels_a[in_front]
    projected = kf_b.k @ points_b
    pixels_b = (projected[:2] / projected[2]).T
    return pixels_a, pixels_b


@dataclass
class ClosureRecord:
    query_frame_id: int
    retrieved_frame_id: int
    retrieval_similarity: float
    match_score: float
    accepted: bool
    loop_submap_id: int | None = None
    mean_disparity_px: float | None = None
    disparity_gate: bool | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class GlobalReconstruction:
    """Per-frame global camera geometry plus the merged point cloud."""

    frame_ids: list[int]
    timestamps: dict[int, float]
    poses: dict[int, np.ndarray]        # world-from-camera rigid transforms
    intrinsics: dict[int, np.ndarray]   # recovered calibration per frame
    points: np.ndarray                  # (n, 3) world positions
    point_conf: np.ndarray              # (n,)
    point_frames: np.ndarray            # (n,) source frame id per point
    skipped: list = field(default_factory=list)


class SlamPipeline:
    """Stateful incremental driver; feed submaps in order, then finalize."""

    def __init__(self, config: SlamConfig | None = None, source=None):
        self.config = config or SlamConfig()
        self.source = source
        self.graph = Graph()
        self.values: dict[VarId, np.ndarray] = {}
        self.db = DescriptorDB()
        self.keyframes: dict[VarId, Keyframe] = {}
        self.canonical_var: dict[int, VarId] = {}
        self.regular_submaps: list[Submap] = []
        self.loop_submaps: list[Submap] = []
        self.closures: list[ClosureRecord] = []
        self.attempted_pairs: set[tuple[int, int]] = set()
        self.optimizations: list[dict] = []
        self.warnings: list[str] = []
        self.timings = {"ingest_s": 0.0, "optimize_s": 0.0, "recover_s": 0.0}
        self._keyframe_counter = 0

    # graph assembly ---------------------------------------------------------

    def _check_overlap(self, s: Submap) -> None:
        if s.kind != REGULAR:
            raise OverlapViolationError(
                f"ingest_submap expects regular submaps, got {s.kind!r}")
        if not self.regular_submaps:
            return
        prev = self.regular_submaps[-1]
        if s.submap_id <= prev.submap_id:
            raise OverlapViolationError(
                f"submap ids must increase, got {s.submap_id} after {prev.submap_id}")
        if s.keyframes[0].frame_id != prev.keyframes[-1].frame_id:
            raise OverlapViolationError(
                f"submap {s.submap_id} must start with frame "
                f"{prev.keyframes[-1].frame_id}, got {s.keyframes[0].frame_id}")

    def _add_submap_variables(self, s: Submap) -> None:
        for kf in s.keyframes:
            var = (s.submap_id, kf.frame_id)
            self.graph.add_variable(var)
            self.keyframes[var] = kf
            if kf.frame_id not in self.canonical_var:
                self.canonical_var[kf.frame_id] = var

    def _initialize_chain(self, s: Submap, base: np.ndarray) -> None:
        """Set submap variables to base composed with the reported poses."""
        first = s.keyframes[0]
        self.values[(s.submap_id, first.frame_id)] = base.copy()
        for prev, kf in zip(s.keyframes, s.keyframes[1:]):
            rel = np.linalg.solve(prev.pose, kf.pose)
            self.values[(s.submap_id, kf.frame_id)] = sl4_normalize(
                self.values[(s.submap_id, prev.frame_id)] @ se3_to_sl4(rel))

    def _overlap_inter_edge(self, prev: Submap, s: Submap) -> None:
        kf_prev = prev.keyframes[-1]
        kf_new = s.keyframes[0]
        var_prev = (prev.submap_id, kf_prev.frame_id)
        var_new = (s.submap_id, kf_new.frame_id)
        mode = self.config.inter_edge_mode
        if mode == "identity":
            self.graph.add_edge(identity_inter_edge(
                var_prev, var_new, sigma=self.config.sigma_inter))
            return
        if mode == "point_align":
            self._point_align_edge(kf_prev, kf_new, var_prev, var_new,
                                   sigma=self.config.sigma_inter, kind=INTER)
            return
        try:
            self.graph.add_edge(inter_edge(
                kf_prev, kf_new, var_prev, var_new,
                conf_percentile=self.config.conf_percentile,
                min_points=self.config.min_inter_points,
                sigma=self.config.sigma_inter))
        except InsufficientPointsError as err:
            self.warnings.append(
                f"inter edge {var_prev}->{var_new} dropped: {err}")

    def _point_align_edge(self, kf_i: Keyframe, kf_j: Keyframe,
                          var_i: VarId, var_j: VarId,
                          sigma: float, kind: str) -> None:
        """Ablation inter edge from an unconstrained 15-DoF point fit."""
        x_i = back_project(kf_i.k, kf_i.depth)
        x_j = back_project(kf_j.k, kf_j.depth)
        mask = (confidence_mask(kf_i.conf, self.config.conf_percentile)
                & confidence_mask(kf_j.conf, self.config.conf_percentile))
        try:
            h, degenerate, gap = estimate_h_15dof(
                x_i, x_j, mask, min_points=self.config.min_inter_points)
        except InsufficientPointsError as err:
            self.warnings.append(
                f"point-align edge {var_i}->{var_j} dropped: {err}")
            return
        if not degenerate and abs(np.linalg.det(h) - 1.0) <= 1e-6:
            # the optimizer takes the matrix log of measurement-corrected
            # relative transforms every iteration; a fit the detector let
            # through must still be loggable or it would blow up there.
            try:
                sl4_log(h)
            except LogDivergenceError:
                degenerate = True
        if degenerate or abs(np.linalg.det(h) - 1.0) > 1e-6:
            self.warnings.append(
                f"point-align edge {var_i}->{var_j} degenerate "
                f"(singular value gap {gap:.3e}); using identity instead")
            self.graph.add_edge(identity_inter_edge(
                var_i, var_j, sigma=sigma, kind=kind))
            return
        self.graph.add_edge(EdgeMeasurement(
            var_i=var_i, var_j=var_j, h_meas=h,
            sigma=np.full(15, float(sigma)), kind=kind))

    # loop closures ----------------------------------------------------------

    def _loop_disparity(self, loop: Submap) -> tuple[float | None, bool | None]:
        try:
            pix_r, pix_q = projected_pixel_pairs(
                loop.keyframes[0], loop.keyframes[1],
                conf_percentile=self.config.conf_percentile)
            passed = disparity_gate(pix_r, pix_q, self.config.min_disparity_px)
            mean_px = float(np.linalg.norm(pix_r - pix_q, axis=1).mean())
            return mean_px, passed
        except (EmptyCorrespondencesError, PointAtInfinityError):
            return None, None

    def _add_loop_submap(self, loop: Submap, record: ClosureRecord) -> None:
        if loop.kind != LOOP_CLOSURE or len(loop.keyframes) != 2:
            raise FormatError(
                f"loop submap {loop.submap_id} must be a two-frame closure")
        if self.graph.has_variable((loop.submap_id, loop.keyframes[0].frame_id)):
            self.warnings.append(
                f"loop submap id {loop.submap_id} already in graph; skipped")
            return
        self.loop_submaps.append(loop)
        record.loop_submap_id = loop.submap_id
        for kf in loop.keyframes:
            var = (loop.submap_id, kf.frame_id)
            self.graph.add_variable(var)
            self.keyframes[var] = kf
            # initialize at the original copy's current estimate
            self.values[var] = self.values[self.canonical_var[kf.frame_id]].copy()
        for edge in intra_edges(loop, sigma=self.config.sigma_intra,
                                kind=LOOP_INTRA):
            self.graph.add_edge(edge)
        for kf in loop.keyframes:
            original_var = self.canonical_var[kf.frame_id]
            original_kf = self.keyframes[original_var]
            loop_var = (loop.submap_id, kf.frame_id)
            try:
                self.graph.add_edge(inter_edge(
                    original_kf, kf, original_var, loop_var,
                    conf_percentile=self.config.conf_percentile,
                    min_points=self.config.min_inter_points,
                    sigma=self.config.sigma_inter, kind=LOOP_INTER))
            except InsufficientPointsError as err:
                self.warnings.append(
                    f"loop inter edge {original_var}->{loop_var} dropped: {err}")

    def _attempt_closures(self, s: Submap) -> None:
        for kf in s.keyframes:
            index = self._keyframe_counter
            self._keyframe_counter += 1
            if kf.descriptor is None:
                continue
            hit = None
            if index % self.config.retrieval_stride == 0:
                hit = query_place(self.db, kf.descriptor, s.submap_id,
                                  self.config.retrieval_threshold)
            if kf.frame_id not in self.canonical_var or \
                    self.canonical_var[kf.frame_id] == (s.submap_id, kf.frame_id):
                self.db.add(kf.frame_id, s.submap_id, kf.descriptor)
            if hit is None:
                continue
            retrieved_id, similarity = hit
            pair = (kf.frame_id, retrieved_id)
            if pair in self.attempted_pairs:
                continue
            self.attempted_pairs.add(pair)
            if kf.query_tokens is None or kf.key_tokens is None:
                self.warnings.append(
                    f"frame {kf.frame_id} has no tokens; closure skipped")
                continue
            try:
                loop = self.source.loop_submap(kf.frame_id, retrieved_id)
            except FormatError as err:
                self.warnings.append(f"loop pair {pair} unavailable: {err}")
                continue
            retrieved_kf = loop.keyframes[0]
            alpha, accepted = verify_pair(
                TokenSet(kf.query_tokens, kf.key_tokens),
                TokenSet(retrieved_kf.query_tokens, retrieved_kf.key_tokens),
                threshold=self.config.match_threshold)
            record = ClosureRecord(
                query_frame_id=kf.frame_id,
                retrieved_frame_id=retrieved_id,
                retrieval_similarity=similarity,
                match_score=alpha,
                accepted=bool(accepted),
            )
            self.closures.append(record)
            if accepted:
                record.mean_disparity_px, record.disparity_gate = \
                    self._loop_disparity(loop)
                self._add_loop_submap(loop, record)

    # driver -----------------------------------------------------------------

    def ingest_submap(self, s: Submap) -> None:
        start = time.perf_counter()
        self._check_overlap(s)
        previous = self.regular_submaps[-1] if self.regular_submaps else None
        self._add_submap_variables(s)
        if previous is None:
            base = np.eye(4)
        else:
            base = self.values[(previous.submap_id, s.keyframes[0].frame_id)]
        self._initialize_chain(s, base)
        for edge in intra_edges(s, sigma=self.config.sigma_intra):
            self.graph.add_edge(edge)
        if previous is not None:
            self._overlap_inter_edge(previous, s)
        self.regular_submaps.append(s)
        anchor_first(self.graph, sigma=self.config.sigma_anchor)

        closures_before = len(self.loop_submaps)
        if self.config.enable_loop_closures and self.source is not None:
            self._attempt_closures(s)
        new_closure = len(self.loop_submaps) > closures_before
        self.timings["ingest_s"] += time.perf_counter() - start

        if self.config.optimize_every_submap or new_closure:
            self._optimize(s.submap_id)

    def _optimize(self, submap_id: int) -> None:
        start = time.perf_counter()
        self.values, report = optimize_lm(self.graph, self.values,
                                          self.config.optimizer)
        elapsed = time.perf_counter() - start
        self.timings["optimize_s"] += elapsed
        entry = {
            "submap_id": submap_id,
            "iterations": report.iterations,
            "accepted_steps": report.accepted_steps,
            "initial_cost": report.initial_cost,
            "final_cost": report.final_cost,
            "converged": report.converged,
            "reason": report.reason,
            "seconds": elapsed,
        }
        self.optimizations.append(entry)
        if not report.converged:
            self.warnings.append(
                f"optimization after submap {submap_id} stopped without "
                f"convergence ({report.reason})")

    def finalize(self) -> GlobalReconstruction:
        start = time.perf_counter()
        rec = recover_reconstruction(self.values, self.regular_submaps,
                                     self.config)
        self.timings["recover_s"] += time.perf_counter() - start
        for item in rec.skipped:
            self.warnings.append(
                f"frame {item[1]} of submap {item[0]} skipped: {item[2]}")
        return rec

    def edge_counts(self) -> dict:
        counts: dict[str, int] = {}
        for edge in self.graph.edges:
            counts[edge.kind] = counts.get(edge.kind, 0) + 1
        return counts

    def report(self) -> dict:
        accepted = sum(1 for c in self.closures if c.accepted)
        final_cost = (self.optimizations[-1]["final_cost"]
                      if self.optimizations else None)
        return {
            "config": self.config.to_dict(),
            "variables": len(self.graph.variables),
            "edges": self.edge_counts(),
            "closures": {
                "found": len(self.closures),
                "accepted": accepted,
                "rejected": len(self.closures) - accepted,
                "details": [c.to_dict() for c in self.closures],
            },
            "optimizations": self.optimizations,
            "final_cost": final_cost,
            "warnings": list(self.warnings),
            "timings": dict(self.timings),
        }


def recover_reconstruction(values: dict, submaps: list[Submap],
                           config: SlamConfig | None = None) -> GlobalReconstruction:
    """Recover global camera geometry and the merged world point cloud.

    For each regular keyframe incidence, the projection [K | 0] H^-1 is
    split into recovered intrinsics and a rigid cam-from-world pose; the
    canonical pose of a frame comes from its earliest submap.  Confident
    pixels are back-projected with the reported depth and pushed through H
    into world coordinates.  Frames whose projection cannot be decomposed
    are skipped and recorded.
    """
    config = config or SlamConfig()
    poses: dict[int, np.ndarray] = {}
    intrinsics: dict[int, np.ndarray] = {}
    timestamps: dict[int, float] = {}
    skipped: list = []
    cloud: list[np.ndarray] = []
    cloud_conf: list[np.ndarray] = []
    cloud_frames: list[np.ndarray] = []

    for s in sorted(submaps, key=lambda x: x.submap_id):
        if s.kind != REGULAR:
            continue
        for kf in s.keyframes:
            var = (s.submap_id, kf.frame_id)
            if var not in values:
                skipped.append((s.submap_id, kf.frame_id, "no estimate"))
                continue
            h = values[var]
            projection = np.hstack([kf.k, np.zeros((3, 1))]) @ np.linalg.inv(h)
            try:
                k_rec, cam_from_world = rq_decompose_projection(projection)
            except SingularProjectionError as err:
                skipped.append((s.submap_id, kf.frame_id, str(err)))
                continue
            if kf.frame_id not in poses:
                poses[kf.frame_id] = np.linalg.inv(cam_from_world)
                intrinsics[kf.frame_id] = k_rec
                timestamps[kf.frame_id] = kf.timestamp
            mask = confidence_mask(kf.conf, config.conf_percentile).ravel()
            pts_cam = back_project(kf.k, kf.depth).reshape(3, -1).T[mask]
            try:
                pts_world = sl4_act(h, pts_cam)
            except PointAtInfinityError as err:
                skipped.append((s.submap_id, kf.frame_id, str(err)))
                continue
            cloud.append(pts_world)
            cloud_conf.append(kf.conf.ravel()[mask])
            cloud_frames.append(np.full(mask.sum(), kf.frame_id, dtype=np.int64))

    if cloud:
        points = np.concatenate(cloud)
        conf = np.concatenate(cloud_conf)
        frames = np.concatenate(cloud_frames)
    else:
        points = np.zeros((0, 3))
        conf = np.zeros(0)
        frames = np.zeros(0, dtype=np.int64)
    return GlobalReconstruction(
        frame_ids=sorted(poses),
        timestamps=timestamps,
        poses=poses,
        intrinsics=intrinsics,
        points=points,
        point_conf=conf,
        point_frames=frames,
        skipped=skipped,
    )


def reconstruction_trajectory(rec: GlobalReconstruction) -> Trajectory:
    order = sorted(rec.frame_ids, key=lambda f: (rec.timestamps[f], f))
    times = np.array([rec.timestamps[f] for f in order])
    positions = np.stack([rec.poses[f][:3, 3] for f in order]) \
        if order else np.zeros((0, 3))
    quats = np.stack([rotation_to_quat(rec.poses[f][:3, :3]) for f in order]) \
        if order else np.zeros((0, 4))
    return Trajectory(times, positions, quats)


def export_trajectory(rec: GlobalReconstruction, path) -> None:
    write_tum(path, reconstruction_trajectory(rec))


def export_ply(rec: GlobalReconstruction, path) -> None:
    write_ply(path, rec.points, rec.point_conf, rec.point_frames)


def run_slam(source, config: SlamConfig | None = None, out_dir=None):
    """Feed every submap of a source through the pipeline.

    Returns (reconstruction, report).  When ``out_dir`` is given, writes
    trajectory.tum, map.ply and report.json there.
    """
    config = config or SlamConfig()
    pipeline = SlamPipeline(config, source=source)
    total_start = time.perf_counter()
    for submap in source.regular_submaps():
        pipeline.ingest_submap(submap)
    rec = pipeline.finalize()
    report = pipeline.report()
    report["timings"]["total_s"] = time.perf_counter() - total_start
    report["frames"] = len(rec.frame_ids)
    report["points"] = int(rec.points.shape[0])

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        export_trajectory(rec, os.path.join(out_dir, TRAJECTORY_NAME))
        export_ply(rec, os.path.join(out_dir, MAP_NAME))
        with open(os.path.join(out_dir, REPORT_NAME), "w") as fh:
            json.dump(report, fh, indent=1)
            fh.write("\n")
    return rec, report
